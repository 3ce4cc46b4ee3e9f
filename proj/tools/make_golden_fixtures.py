"""Builds reference fixtures for the backbone numerics tests.

Tiny variants of the open_clip ResNet / ViT and the timm ConvNeXt are built with
random weights; weights, a probe input, the eval-mode embedding, the gradient of
sum(embedding * probe) w.r.t. input and parameters, and the train-mode
embedding are written to tests/data/<arch>_tiny.dfdw.

    python tools/make_golden_fixtures.py [--out tests/data]
"""

import argparse
import math
import os
import sys

import torch
from torch import nn

sys.path.insert(0, os.path.dirname(__file__))
import dfd_archive  # noqa: E402


def randomize(model, gen):
    with torch.no_grad():
        for name, t in model.state_dict().items():
            if not t.is_floating_point():
                continue
            if name.endswith("running_var"):
                t.copy_(0.5 + torch.rand(t.shape, generator=gen, dtype=t.dtype))
            elif name.endswith("running_mean"):
                t.copy_(0.1 * torch.randn(t.shape, generator=gen, dtype=t.dtype))
            elif t.dim() >= 2:
                fan_in = t[0].numel()
                t.copy_(torch.randn(t.shape, generator=gen, dtype=t.dtype) / math.sqrt(fan_in))
            elif name.endswith("weight") or name.endswith("gamma"):
                t.copy_(1.0 + 0.2 * torch.randn(t.shape, generator=gen, dtype=t.dtype))
            else:
                t.copy_(0.1 * torch.randn(t.shape, generator=gen, dtype=t.dtype))


def tiny_resnet():
    from open_clip.modified_resnet import ModifiedResNet
    return ModifiedResNet(layers=(1, 1, 1, 1), output_dim=32, heads=2, image_size=64, width=8), 64, {
        "layers": [1, 1, 1, 1], "width": 8, "heads": 2, "output_dim": 32, "image_size": 64}


def tiny_vit():
    from open_clip.transformer import QuickGELU, VisionTransformer
    m = VisionTransformer(image_size=32, patch_size=8, width=32, layers=2, heads=4, mlp_ratio=4.0,
                          output_dim=16, act_layer=QuickGELU)
    return m, 32, {"image_size": 32, "patch_size": 8, "width": 32, "layers": 2, "heads": 4,
                   "mlp_ratio": 4, "output_dim": 16, "quick_gelu": True}


class TinyConvNeXt(nn.Module):
    def __init__(self):
        super().__init__()
        import timm
        self.trunk = timm.create_model("convnext_base", depths=(1, 1, 1, 1), dims=(8, 16, 32, 64), num_classes=0)
        self.head = nn.Sequential()
        self.head.add_module("drop", nn.Dropout(0.0))
        self.head.add_module("proj", nn.Linear(64, 16, bias=False))

    def forward(self, x):
        return self.head(self.trunk(x))


def tiny_convnext():
    return TinyConvNeXt(), 64, {"depths": [1, 1, 1, 1], "dims": [8, 16, 32, 64], "output_dim": 16, "image_size": 64}


def build(arch, factory, out_dir, seed):
    gen = torch.Generator().manual_seed(seed)
    model, side, spec = factory()
    model = model.double()
    randomize(model, gen)
    x = torch.randn(2, 3, side, side, generator=gen, dtype=torch.float64)

    model.eval()
    xe = x.clone().requires_grad_(True)
    y = model(xe)
    probe = torch.randn(y.shape, generator=gen, dtype=torch.float64)
    model.zero_grad()
    (y * probe).sum().backward()

    tensors = {}
    params = dict(model.named_parameters())
    for name, t in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        tensors["weights." + name] = t.detach().clone().numpy()
        if name in params and params[name].grad is not None:
            tensors["grad." + name] = params[name].grad.clone().numpy()
    tensors["input"] = x.numpy()
    tensors["probe"] = probe.numpy()
    tensors["eval_output"] = y.detach().numpy()
    tensors["grad_input"] = xe.grad.numpy()

    model.train()
    with torch.no_grad():
        tensors["train_output"] = model(x).numpy()

    path = os.path.join(out_dir, f"{arch}_tiny.dfdw")
    dfd_archive.save(path, tensors, {"arch": arch, "spec": spec, "seed": seed})
    print(f"wrote {path} ({len(tensors)} tensors)")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "tests", "data"))
    ap.add_argument("--seed", type=int, default=1234)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for arch, factory in (("resnet", tiny_resnet), ("vit", tiny_vit), ("convnext", tiny_convnext)):
        build(arch, factory, args.out, args.seed)


if __name__ == "__main__":
    main()
