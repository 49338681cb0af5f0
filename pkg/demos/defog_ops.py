"""Apply each image-processing op to one fogged scene and print its PSNR against the clear image.

    python3 demos/defog_ops.py [--level 7] [--out ops_demo]
"""
import argparse
from pathlib import Path

import numpy as np

from gdip.datagen import FogParams, SceneSpec, apply_fog_asm, synth_scene
from gdip.ipops import ALL_KINDS, PARAM_COUNTS, apply_op, map_raw_params
from gdip.metrics import psnr
from gdip.tensor import write_image


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--level", type=int, default=7)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--out", default="ops_demo")
    args = ap.parse_args()

    clear, _ = synth_scene(SceneSpec(seed=args.seed))
    fogged = apply_fog_asm(clear, FogParams(args.level, atmos=0.9))
    out = Path(args.out)
    out.mkdir(exist_ok=True)
    write_image(out / "clear.png", clear)
    write_image(out / "fogged.png", fogged)
    print(f"{'fogged':>8}  {psnr(fogged, clear):6.2f} dB")
    for kind in ALL_KINDS:
        # raw parameters of zero give each op its mid-range setting
        q = map_raw_params(kind, np.zeros(PARAM_COUNTS[kind]))
        y = apply_op(kind, fogged, q)
        write_image(out / f"{kind.value}.png", y)
        print(f"{kind.value:>8}  {psnr(y, clear):6.2f} dB  params={np.round(q, 3).tolist()}")


if __name__ == "__main__":
    main()
