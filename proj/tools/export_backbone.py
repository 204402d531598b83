"""Export the ResNet-50 stem and layer1..layer3 from torchvision as a
TorchScript module that `famcount --backbone <file>` can load.

    python3 tools/export_backbone.py --out resnet50_trunk.pt           # ImageNet weights
    python3 tools/export_backbone.py --random-init --seed 3 --out x.pt  # no download

Parameter names are kept as in torchvision (conv1.weight, layer2.0.bn1.running_mean, ...).
"""
import argparse

import torch
import torchvision


class Trunk(torch.nn.Module):
    def __init__(self, net):
        super().__init__()
        self.conv1 = net.conv1
        self.bn1 = net.bn1
        self.relu = net.relu
        self.maxpool = net.maxpool
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer1(x)
        b3 = self.layer2(x)
        b4 = self.layer3(b3)
        return b3, b4


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--random-init", action="store_true", help="skip the pretrained download")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    if args.random_init:
        net = torchvision.models.resnet50(weights=None)
        # Non-trivial batch-norm statistics so a loader that drops buffers is caught.
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.uniform_(-0.1, 0.1)
                m.running_var.uniform_(0.5, 2.0)
                m.weight.data.uniform_(0.2, 0.6)
    else:
        net = torchvision.models.resnet50(weights=torchvision.models.ResNet50_Weights.IMAGENET1K_V1)
    trunk = Trunk(net).eval()
    torch.jit.script(trunk).save(args.out)


if __name__ == "__main__":
    main()
