import argparse


def build_parser():
    parser = argparse.ArgumentParser(description='command line entry point')
    parser.add_argument('--verbose', action='store_true')
    parser.add_argument('paths', nargs='*')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    for path in args.paths:
        print(path)
    return 0
