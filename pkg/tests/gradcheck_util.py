"""Central finite differences against autograd, for float64 tests."""
import torch


def fd_relative_error(loss_fn, params, step=1e-5, max_entries=None, seed=0):
    """max over ``params`` of ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||).

    When ``max_entries`` is set, a seeded random subset of entries per tensor is checked.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad.detach().reshape(-1).clone()
        flat = p.data.view(-1)
        idx = torch.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = torch.randperm(flat.numel(), generator=gen)[:max_entries]
        numeric = torch.zeros(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for k, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * step)
        a = analytic[idx]
        denom = max(a.norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (a - numeric).norm().item() / denom)
    return worst


def relu_margin(model, fn):
    """Smallest |input| seen by any (leaky) ReLU of ``model`` while running ``fn()``.

    Central differences are only meaningful when no pre-activation lies within
    one step of the kink, so callers pick instances with a comfortable margin.
    """
    seen = []
    hooks = [m.register_forward_hook(lambda mod, inp, out: seen.append(inp[0].abs().min().item()))
             for m in model.modules() if isinstance(m, (torch.nn.ReLU, torch.nn.LeakyReLU))]
    try:
        with torch.no_grad():
            fn()
    finally:
        for h in hooks:
            h.remove()
    return min(seen)


def generator_path_error():
    """Relative error through orthogonalize -> decompose -> recombine -> decode on a tiny float64 generator."""
    from lac.generator import GeneratorConfig, GeneratorModel, decompose_tensor, orthogonalize, recombine_tensor

    torch.manual_seed(0)
    model = GeneratorModel(GeneratorConfig(enc_channels=(8, 8, 8), dec_channels=(8, 8), J=6, K=2),
                           dtype=torch.float64)
    torch.manual_seed(3)
    latent = torch.randn(2, 4, 8, dtype=torch.float64, requires_grad=True)
    target = torch.randn(2, 32, 13, 2, dtype=torch.float64)

    def loss():
        d = orthogonalize(model.dictionary.raw)
        a_m, a_c = decompose_tensor(latent, d, 6)
        r_m, r_c = recombine_tensor(a_m, a_c, d)
        return ((model.decode(r_m + r_c) - target) ** 2).mean()

    if relu_margin(model, loss) <= 1e-4:
        raise AssertionError("instance has a pre-activation within 1e-4 of the kink")
    params = [model.dictionary.raw, latent, model.decoder[1].weight, model.decoder[-1].bias]
    return fd_relative_error(loss, params, max_entries=40)


def tiny_encoder_error():
    """Relative error of BCE through a 4-joint, 3-block float64 visual encoder and classifier."""
    from lac.encoder import EncoderConfig, VisualEncoder
    from lac.skeleton import SkeletonTopology, register_topology

    register_topology(SkeletonTopology("line4", 4, ((0, 1), (1, 2), (2, 3)), 0, ("a", "b", "c", "d")))
    torch.manual_seed(0)
    model = VisualEncoder(EncoderConfig(num_joints=4, channels=(8, 8, 8), blocks=(1, 1, 1), num_classes=3)).double()
    # first data seed whose pre-activations all stay 10 steps away from the ReLU kink
    for data_seed in range(100):
        g = torch.Generator().manual_seed(data_seed)
        x = torch.randn(2, 8, 4, 2, generator=g, dtype=torch.float64, requires_grad=True)
        if relu_margin(model, lambda: model.logits(x)) > 1e-4:
            break
    else:
        raise AssertionError("no kink-free instance found")
    y = torch.randint(0, 2, (2, 8, 3), generator=g).double()

    def loss():
        return torch.nn.functional.binary_cross_entropy_with_logits(model.logits(x), y)

    return fd_relative_error(loss, [x, *model.parameters()], max_entries=30)
