"""Convert torchvision's ImageNet VGG-19 to the encoder weight container.

Usage: python scripts/convert_vgg19.py OUT.safetensors

Needs torch, torchvision and safetensors, and network access the first time
torchvision downloads the weights.
"""

import sys

import torch
from safetensors.torch import save_file
from torchvision.models import VGG19_Weights, vgg19

# Index of each convolution inside `vgg19().features`, up to conv4_1.
LAYERS = {
    "conv1_1": 0,
    "conv1_2": 2,
    "conv2_1": 5,
    "conv2_2": 7,
    "conv3_1": 10,
    "conv3_2": 12,
    "conv3_3": 14,
    "conv3_4": 16,
    "conv4_1": 19,
}


def main() -> None:
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    features = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
    tensors = {}
    for name, index in LAYERS.items():
        conv = features[index]
        tensors[f"vgg19/{name}/weight"] = conv.weight.detach().to(torch.float32).contiguous()
        tensors[f"vgg19/{name}/bias"] = conv.bias.detach().to(torch.float32).contiguous()
    save_file(tensors, sys.argv[1], metadata={"preprocessing": "imagenet"})


if __name__ == "__main__":
    main()
