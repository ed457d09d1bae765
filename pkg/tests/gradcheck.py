"""Central finite-difference check of analytic gradients on random weight coordinates."""
import numpy as np
import torch
import torch.nn.functional as F

from scleraseg.segmenters import FCN8, PatchDiscriminator, SegNet, UNetGenerator


def perturb_weights(net: torch.nn.Module, rng: np.random.Generator, scale: float = 0.05) -> None:
    """Add small noise everywhere so no weight (bias, zero-initialised score conv) is exactly zero."""
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.from_numpy(rng.normal(0.0, scale, tuple(p.shape))).to(p.dtype))


def check(net: torch.nn.Module, loss_fn, n_coords: int, rng: np.random.Generator,
          eps: float = 1e-6, floor: float = 1e-6) -> list[float]:
    """Relative errors between autograd and central differences on ``n_coords`` coordinates."""
    params = [p for p in net.parameters() if p.requires_grad]
    net.zero_grad()
    loss_fn().backward()
    sizes = np.array([p.numel() for p in params])
    errors = []
    for _ in range(n_coords):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        p = params[k]
        i = int(rng.integers(p.numel()))
        analytic = p.grad.view(-1)[i].item()
        flat = p.data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
        numeric = (up - down) / (2 * eps)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return errors


def tiny_cases(seed: int = 0):
    """(name, net, loss closure) for the four networks at channel/16 and 32x32 input, float64."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    x = torch.from_numpy(rng.random((2, 3, 32, 32)))
    labels = torch.from_numpy(rng.random((2, 32, 32)) < 0.4).long()
    target = labels[:, None].double().repeat(1, 3, 1, 1) * 2 - 1

    cases = []
    fcn = FCN8((32, 32), 3, width_divisor=16).double().eval()
    segnet = SegNet((32, 32), 3, width_divisor=16).double().eval()
    gen = UNetGenerator(32, 3, 3, ngf=4).double().eval()
    disc = PatchDiscriminator(6, ndf=4).double().eval()
    for net in (fcn, segnet, gen, disc):
        perturb_weights(net, rng)
    cases.append(("fcn", fcn, lambda: F.cross_entropy(fcn(x), labels)))
    cases.append(("segnet", segnet, lambda: F.cross_entropy(segnet(x), labels)))
    cases.append(("generator", gen, lambda: F.mse_loss(gen(x), target)))
    fake = target.roll(1, dims=-1)
    cases.append(("discriminator", disc, lambda: (
        F.binary_cross_entropy_with_logits(disc(x, target), torch.ones(2, 1, 2, 2, dtype=torch.float64))
        + F.binary_cross_entropy_with_logits(disc(x, fake), torch.zeros(2, 1, 2, 2, dtype=torch.float64)))))
    return cases
