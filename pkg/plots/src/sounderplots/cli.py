"""Command-line entry: sounder-plot <kind> --in FILE --out FILE [options]."""

from __future__ import annotations

import argparse
import json
import sys

from .render import PLOT_KINDS, PlotJob, SchemaError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sounder-plot",
        description="Render channel-sounder simulation outputs to figures")
    parser.add_argument("kind", choices=PLOT_KINDS)
    parser.add_argument("--in", dest="in_path", required=True,
                        help="input file (CSV, JSON, or waveform binary)")
    parser.add_argument("--out", dest="out_path", required=True,
                        help="output image path")
    parser.add_argument("--threshold-db", type=float, default=30.0,
                        help="display cutoff below the maximum (dB)")
    parser.add_argument("--title", default=None)
    parser.add_argument("--compare", action="append", default=[],
                        metavar="LABEL=FILE",
                        help="extra ambiguity curves to overlay")
    args = parser.parse_args(argv)

    extra = {}
    for item in args.compare:
        if "=" not in item:
            print(f"error: --compare expects LABEL=FILE, got {item!r}",
                  file=sys.stderr)
            return 2
        label, path = item.split("=", 1)
        extra[label] = path

    try:
        job = PlotJob(kind=args.kind, in_path=args.in_path,
                      out_path=args.out_path, threshold_db=args.threshold_db,
                      title=args.title, extra_inputs=extra)
        result = render(job)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
