"""Converts published pretrained backbones to <arch>-<init>.dfdw artifacts.

Sources (pinned):
    resnet50-clip        open_clip RN50 / openai
    vit_b32-clip         open_clip ViT-B-32 / openai
    convnext_base-clip   open_clip convnext_base / laion400m_s13b_b51k
    resnet50-imagenet    torchvision ResNet50_Weights.IMAGENET1K_V1
    vit_b32-imagenet     timm vit_base_patch32_224.augreg_in21k_ft_in1k
    convnext_base-imagenet  timm convnext_base.fb_in1k

ImageNet checkpoints are mapped onto the CLIP-variant graph. Tensors with no
counterpart (ResNet stem and attention pool, ViT ln_pre and proj, ConvNeXt
proj) are left out and stay randomly initialized; the detector's load report
and `dfd profile` list them.

    python tools/convert_weights.py --arch all --init clip --out weights
    python tools/convert_weights.py --arch resnet50 --init imagenet --checkpoint resnet50.pth
    python tools/convert_weights.py --arch vit_b32 --init clip --random   # mapping check, no download
"""

import argparse
import hashlib
import os
import sys

import numpy as np
import torch

sys.path.insert(0, os.path.dirname(__file__))
import dfd_archive  # noqa: E402

ARCHS = ("resnet50", "vit_b32", "convnext_base")
CLIP = {"resnet50": ("RN50", "openai"), "vit_b32": ("ViT-B-32", "openai"),
        "convnext_base": ("convnext_base", "laion400m_s13b_b51k")}
IMAGENET = {"resnet50": "torchvision:resnet50:IMAGENET1K_V1", "vit_b32": "timm:vit_base_patch32_224.augreg_in21k_ft_in1k",
            "convnext_base": "timm:convnext_base.fb_in1k"}


def clip_target(arch):
    import open_clip
    name, _ = CLIP[arch]
    return open_clip.create_model(name, pretrained=None).visual.state_dict()


def clip_source(arch, checkpoint, random):
    import open_clip
    name, tag = CLIP[arch]
    if checkpoint:
        model = open_clip.create_model(name, pretrained=checkpoint)
    else:
        model = open_clip.create_model(name, pretrained=None if random else tag)
    return model.visual.state_dict(), f"open_clip:{name}:{'random' if random else checkpoint or tag}"


def imagenet_source(arch, checkpoint, random):
    kind, _, rest = IMAGENET[arch].partition(":")
    if kind == "torchvision":
        import torchvision
        model = torchvision.models.resnet50(weights=None if random or checkpoint else "IMAGENET1K_V1")
    else:
        import timm
        model = timm.create_model(rest, pretrained=not (random or checkpoint))
    if checkpoint:
        state = torch.load(checkpoint, map_location="cpu")
        model.load_state_dict(state.get("state_dict", state) if isinstance(state, dict) else state)
    return model.state_dict(), IMAGENET[arch] + (":random" if random else f":{checkpoint}" if checkpoint else "")


def map_imagenet(arch, src):
    """Source state dict -> (CLIP-variant names, dropped source keys)."""
    out, dropped = {}, []
    if arch == "resnet50":
        for k, v in src.items():
            if k.startswith("layer"):
                out[k] = v
            else:
                dropped.append(k)  # 7x7 stem and fc have no counterpart
    elif arch == "vit_b32":
        for k, v in src.items():
            parts = k.split(".")
            if k == "cls_token":
                out["class_embedding"] = v.reshape(-1)
            elif k == "pos_embed":
                out["positional_embedding"] = v.reshape(v.shape[-2], v.shape[-1]).clone()
            elif k == "patch_embed.proj.weight":
                out["conv1.weight"] = v
            elif k == "norm.weight":
                out["ln_post.weight"] = v
            elif k == "norm.bias":
                out["ln_post.bias"] = v
            elif parts[0] == "blocks":
                names = {"norm1": "ln_1", "norm2": "ln_2", "attn.qkv.weight": "attn.in_proj_weight",
                         "attn.qkv.bias": "attn.in_proj_bias", "attn.proj": "attn.out_proj", "mlp.fc1": "mlp.c_fc",
                         "mlp.fc2": "mlp.c_proj"}
                rest = ".".join(parts[2:])
                for a, b in names.items():
                    if rest.startswith(a):
                        rest = b + rest[len(a):]
                        break
                out[f"transformer.resblocks.{parts[1]}.{rest}"] = v
            elif k != "patch_embed.proj.bias":
                dropped.append(k)
        # The patch bias adds the same vector to every patch token: fold it into their positions.
        bias = src.get("patch_embed.proj.bias")
        if bias is not None:
            out["positional_embedding"][1:] += bias
    else:
        for k, v in src.items():
            if k.startswith("head.fc"):
                dropped.append(k)
            else:
                out["trunk." + k] = v
    return out, dropped


def state_hash(state):
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k].detach().cpu().float().numpy()).tobytes())
    return h.hexdigest()


def convert(arch, init, out_dir, checkpoint=None, random=False):
    target = {k: tuple(v.shape) for k, v in clip_target(arch).items() if not k.endswith("num_batches_tracked")}
    if init == "clip":
        src, source = clip_source(arch, checkpoint, random)
        mapped, dropped = dict(src), []
    else:
        src, source = imagenet_source(arch, checkpoint, random)
        mapped, dropped = map_imagenet(arch, src)
    tensors, mismatched = {}, []
    for k, v in mapped.items():
        if k.endswith("num_batches_tracked"):
            continue
        if k not in target:
            dropped.append(k)
        elif tuple(v.shape) != target[k]:
            mismatched.append(k)
        else:
            tensors[k] = v.detach().cpu().float().numpy()
    missing = sorted(k for k in target if k not in tensors)
    notes = []
    if arch == "vit_b32" and init == "imagenet":
        notes.append("source uses exact GELU; the backbone evaluates QuickGELU")
    meta = {"arch": arch, "init": init, "source": source, "sha256": state_hash(src), "missing": missing,
            "dropped": sorted(dropped), "shape_mismatch": sorted(mismatched), "notes": notes}
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{arch}-{init}.dfdw")
    dfd_archive.save(path, tensors, meta)
    print(f"wrote {path}: {len(tensors)} tensors, {len(missing)} left random, {len(dropped)} dropped, "
          f"{len(mismatched)} shape-mismatched")
    return path


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--arch", default="all", help="resnet50, vit_b32, convnext_base or all")
    ap.add_argument("--init", required=True, choices=("clip", "imagenet"))
    ap.add_argument("--out", default="weights")
    ap.add_argument("--checkpoint", help="local source checkpoint instead of downloading")
    ap.add_argument("--random", action="store_true", help="random source weights; checks the mapping offline")
    args = ap.parse_args()
    archs = ARCHS if args.arch == "all" else (args.arch,)
    if args.checkpoint and len(archs) > 1:
        ap.error("--checkpoint needs a single --arch")
    for arch in archs:
        if arch not in ARCHS:
            ap.error(f"unknown arch {arch}")
        convert(arch, args.init, args.out, args.checkpoint, args.random)


if __name__ == "__main__":
    main()
