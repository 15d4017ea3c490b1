"""Move an environment map 50 cm away from where it was captured, in steps
of different sizes, and compare each result with the exact map at that spot.

    python3 demos/translation_study.py --csv translation.csv
"""

import argparse
import csv

from envlight.envmap import data_loss, translate_em, warp_em_distant, weighted_correlation
from envlight.synth import SyntheticScene, ground_truth_em


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--csv", help="write (step_cm, distance_cm, data_loss, correlation) rows")
    ap.add_argument("--width", type=int, default=1000)
    args = ap.parse_args()
    w, h = args.width, args.width // 2
    scene = SyntheticScene.panel_room()
    source = ground_truth_em(scene, [0, 0, 0], w, h)
    truths = {}
    rows = []
    for step in (1, 2, 5, 10, 50):
        em = source
        for i in range(1, 50 // step + 1):
            d = step * i
            # each step re-projects the previous result, so losses accumulate
            em = translate_em(em, [0.01 * d, 0, 0], "permanent").em
            if d not in truths:
                truths[d] = ground_truth_em(scene, [0.01 * d, 0, 0], w, h)
            rows.append((step, d, data_loss(em, truths[d]), weighted_correlation(em, truths[d])))
        print(f"{step:>2} cm steps: loss {rows[-1][2]:.4f}  correlation {rows[-1][3]:.4f}")

    # Ignoring depth: pretend everything is 10 m away and warp by direction only.
    warped = warp_em_distant(source, [0.5, 0, 0], 10.0)
    print(f"distant warp: loss {data_loss(warped, truths[50]):.4f}  "
          f"correlation {weighted_correlation(warped, truths[50]):.4f}")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["step_cm", "distance_cm", "data_loss", "correlation"])
            out.writerows(rows)


if __name__ == "__main__":
    main()
