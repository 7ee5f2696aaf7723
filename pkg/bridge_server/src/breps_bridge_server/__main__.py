import argparse

from .server import serve_stdio, serve_tcp


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="breps-bridge-server")
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--stdio", action="store_true", help="serve on stdin/stdout")
    group.add_argument("--tcp", type=int, metavar="PORT", help="serve on a TCP port")
    parser.add_argument("--host", default="127.0.0.1")
    args = parser.parse_args(argv)
    if args.stdio:
        serve_stdio()
    else:
        serve_tcp(args.tcp, host=args.host)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
