#!/usr/bin/env python3
"""Export DINOv2 ViT-S/14 weights into the crate's tensor container.

Produces a `vit:<path>` loadable file with patch features of shape
(14 x 14, 384) for 224x224 inputs resized to 196x196. Position embeddings
are interpolated here (bicubic, matching the source model's own inference
path) so the Rust side never needs to.

Requires network access once to download the pretrained weights:

    python3 scripts/export_vit_weights.py --out weights/dinov2_vits14.bin

Then point an encoder spec at it, e.g. `vit:weights/dinov2_vits14.bin`.
"""

import argparse
import hashlib
import json
import struct

import torch


def write_container(path, header: dict, tensors: dict):
    buf = bytearray()
    buf += b"LWMB"
    buf += struct.pack("<I", 1)
    hj = json.dumps(header).encode()
    buf += struct.pack("<I", len(hj))
    buf += hj
    buf += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        t = t.detach().double().contiguous()
        nb = name.encode()
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<B", t.dim())
        for d in t.shape:
            buf += struct.pack("<Q", d)
        buf += t.numpy().tobytes()
    digest = hashlib.sha256(bytes(buf)).digest()
    with open(path, "wb") as f:
        f.write(bytes(buf))
        f.write(digest)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--img-size", type=int, default=196)
    args = ap.parse_args()

    model = torch.hub.load("facebookresearch/dinov2", "dinov2_vits14")
    model.eval()
    sd = model.state_dict()

    dim = sd["cls_token"].shape[-1]
    patch = 14
    grid = args.img_size // patch
    depth = len([k for k in sd if k.endswith(".attn.qkv.weight")])
    heads = 6

    tensors = {}
    # conv patch embed -> linear over channel-last flattened patches
    w = sd["patch_embed.proj.weight"]  # [dim, 3, p, p]
    w = w.permute(2, 3, 1, 0).reshape(patch * patch * 3, dim)
    tensors["patch_embed.weight"] = w
    tensors["patch_embed.bias"] = sd["patch_embed.proj.bias"]
    tensors["cls_token"] = sd["cls_token"].reshape(dim)

    # interpolate patch position embeddings to the export grid
    pos = sd["pos_embed"]  # [1, 1 + g0*g0, dim]
    cls_pos = pos[:, :1]
    patch_pos = pos[:, 1:]
    g0 = int(patch_pos.shape[1] ** 0.5)
    patch_pos = patch_pos.reshape(1, g0, g0, dim).permute(0, 3, 1, 2)
    patch_pos = torch.nn.functional.interpolate(
        patch_pos, size=(grid, grid), mode="bicubic", antialias=False
    )
    patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(grid * grid, dim)
    tensors["pos_embed"] = torch.cat([cls_pos.reshape(1, dim), patch_pos], dim=0)

    for i in range(depth):
        p = f"blocks.{i}"
        tensors[f"{p}.norm1.weight"] = sd[f"{p}.norm1.weight"]
        tensors[f"{p}.norm1.bias"] = sd[f"{p}.norm1.bias"]
        tensors[f"{p}.attn.qkv.weight"] = sd[f"{p}.attn.qkv.weight"].t()
        tensors[f"{p}.attn.qkv.bias"] = sd[f"{p}.attn.qkv.bias"]
        tensors[f"{p}.attn.proj.weight"] = sd[f"{p}.attn.proj.weight"].t()
        tensors[f"{p}.attn.proj.bias"] = sd[f"{p}.attn.proj.bias"]
        tensors[f"{p}.ls1.gamma"] = sd[f"{p}.ls1.gamma"]
        tensors[f"{p}.norm2.weight"] = sd[f"{p}.norm2.weight"]
        tensors[f"{p}.norm2.bias"] = sd[f"{p}.norm2.bias"]
        tensors[f"{p}.mlp.fc1.weight"] = sd[f"{p}.mlp.fc1.weight"].t()
        tensors[f"{p}.mlp.fc1.bias"] = sd[f"{p}.mlp.fc1.bias"]
        tensors[f"{p}.mlp.fc2.weight"] = sd[f"{p}.mlp.fc2.weight"].t()
        tensors[f"{p}.mlp.fc2.bias"] = sd[f"{p}.mlp.fc2.bias"]
        tensors[f"{p}.ls2.gamma"] = sd[f"{p}.ls2.gamma"]
    tensors["norm.weight"] = sd["norm.weight"]
    tensors["norm.bias"] = sd["norm.bias"]

    header = {
        "kind": "vit",
        "img_size": args.img_size,
        "patch": patch,
        "dim": dim,
        "depth": depth,
        "heads": heads,
        "mlp_ratio": 4,
    }
    write_container(args.out, header, tensors)
    print(f"wrote {args.out}: dim={dim} depth={depth} grid={grid}x{grid}")


if __name__ == "__main__":
    main()
