#!/usr/bin/env python3
"""Convert torchvision ImageNet weights to the safetensors layout the C++ backbones read.

    python3 tools/export_torchvision_weights.py --arch vit_b32 --out weights/vit_b32.safetensors

The classification head is dropped; batch-norm counters are skipped.
"""
import argparse
import os

import torch
import torchvision
from safetensors.torch import save_file

BUILDERS = {
    "resnet18": (torchvision.models.resnet18, "IMAGENET1K_V1", "fc."),
    "resnet50": (torchvision.models.resnet50, "IMAGENET1K_V1", "fc."),
    "vit_b32": (torchvision.models.vit_b_32, "IMAGENET1K_V1", "heads."),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--arch", required=True, choices=sorted(BUILDERS))
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    build, weights, head = BUILDERS[args.arch]
    net = build(weights=weights)
    state = {
        k: v.detach().float().contiguous()
        for k, v in net.state_dict().items()
        if not k.startswith(head) and not k.endswith("num_batches_tracked")
    }
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_file(state, args.out, {"arch": args.arch, "source": f"torchvision {weights}"})
    print(f"wrote {args.out}: {len(state)} tensors, {sum(v.numel() for v in state.values())} values")


if __name__ == "__main__":
    main()
