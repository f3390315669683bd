"""Print layer tables and parameter counts for the FCN, FC-ResNet and pipeline.

    python3 scripts/arch_summary.py --scale 1 --size 512
"""
import argparse

from segpipe.architectures import build_fc_resnet, build_fcn_preprocessor, format_summary, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", type=float, default=1.0)
    ap.add_argument("--size", type=int, default=512)
    args = ap.parse_args()

    fcn, res = build_fcn_preprocessor(args.scale), build_fc_resnet(args.scale)
    for model in (fcn, res):
        print(format_summary(summarize(model, args.size, args.size)))
        print()
    counts = res.conv_counts()
    nf, nr = fcn.num_parameters(), res.num_parameters()
    print(f"FCN parameters        {nf:>12,}")
    print(f"FC-ResNet parameters  {nr:>12,}")
    print(f"pipeline parameters   {nf + nr:>12,}")
    print(f"FC-ResNet convolutions: {counts}")


if __name__ == "__main__":
    main()
