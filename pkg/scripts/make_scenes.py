"""Write example input files: six-bar mirrored arcs and the two-bar linkage scene."""
import argparse
from pathlib import Path

from metamorph.fabrication_export import export_design_json
from metamorph.scenes import six_bar_curves, springy_linkage
from metamorph.serialization import dumps


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="scenes")
    ap.add_argument("--turn", type=float, default=1.5)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "six_bar_curves.json").write_text(dumps(six_bar_curves(args.turn)))
    st, forms = springy_linkage(spring=False)
    export_design_json(st, forms, path=out / "two_bar_scene.json")
    print(f"wrote {out / 'six_bar_curves.json'} and {out / 'two_bar_scene.json'}")


if __name__ == "__main__":
    main()
