#!/usr/bin/env python3
"""Export a randomly initialised torchvision backbone plus reference features.

Writes <out>/<arch>.safetensors (backbone weights, classification head removed)
and <out>/<arch>_reference.safetensors holding a fixed input batch and the
pooled features torchvision computes for it. Used by the parity test.
"""
import argparse
import os

import torch
import torchvision
from safetensors.torch import save_file


def build(arch):
    if arch == "resnet18":
        net = torchvision.models.resnet18(weights=None)
        net.fc = torch.nn.Identity()
        size = 64
    elif arch == "resnet50":
        net = torchvision.models.resnet50(weights=None)
        net.fc = torch.nn.Identity()
        size = 64
    elif arch == "vit_b32":
        net = torchvision.models.vit_b_32(weights=None)
        net.heads = torch.nn.Identity()
        size = 224
    else:
        raise SystemExit(f"unknown arch {arch}")
    return net, size


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--arch", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--batch", type=int, default=2)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    net, size = build(args.arch)
    # Non-trivial running statistics so eval-mode batch norm is exercised.
    for m in net.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.uniform_(-0.2, 0.2)
            m.running_var.uniform_(0.5, 1.5)
            m.weight.data.uniform_(0.5, 1.5)
            m.bias.data.uniform_(-0.2, 0.2)
    net.eval()

    x = torch.rand(args.batch, 3, size, size) * 2 - 1
    with torch.no_grad():
        z = net(x)

    state = {
        k: v.detach().float().contiguous()
        for k, v in net.state_dict().items()
        if not k.endswith("num_batches_tracked")
    }
    os.makedirs(args.out, exist_ok=True)
    save_file(state, os.path.join(args.out, f"{args.arch}.safetensors"), {"arch": args.arch})
    save_file(
        {"input": x.contiguous(), "features": z.contiguous()},
        os.path.join(args.out, f"{args.arch}_reference.safetensors"),
    )
    print(f"{args.arch}: {sum(v.numel() for v in state.values())} values, features {tuple(z.shape)}")


if __name__ == "__main__":
    main()
