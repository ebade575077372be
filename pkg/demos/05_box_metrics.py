"""The three bounding-box metrics, by example.

CD  - center distance between the two box centers, in centimeters.
IoU - intersection over union of the box volumes.
ESF - enclosing scale factor: the smallest factor by which the estimated
      box must be inflated about its own center to fully contain the
      reference. 1.0 means "already contains it"; it penalizes boxes that
      are well-placed but too small, which IoU alone rewards weakly.

Run:  python3 demos/05_box_metrics.py
"""

import numpy as np

from occatlas.metrics import center_distance, esf, iou
from occatlas.volume import AxisAlignedBox


def cube(center, side):
    center = np.asarray(center, float)
    return AxisAlignedBox(center - side / 2, center + side / 2)


reference = cube([0, 0, 0], 0.02)  # a 2 cm cube

print("2 cm cube vs. a copy shifted diagonally by d on two axes:")
print(f"{'d (cm)':>7} {'CD (cm)':>8} {'IoU':>6} {'ESF':>6}")
for d_cm in (0.0, 0.25, 0.5, 0.75, 1.0):
    est = cube([d_cm / 100, d_cm / 100, 0], 0.02)
    print(
        f"{d_cm:7.2f} {center_distance(est, reference):8.2f} "
        f"{iou(est, reference):6.2f} {esf(est, reference):6.2f}"
    )

print("\nwhy ESF exists:")
tiny = cube([0, 0, 0], 0.005)  # perfectly centered but 4x too small
print(f"  centered 0.5 cm estimate of a 2 cm target: CD={center_distance(tiny, reference):.2f} cm, "
      f"IoU={iou(tiny, reference):.3f}, ESF={esf(tiny, reference):.1f}")
big = cube([0, 0, 0], 0.08)
print(f"  centered 8 cm estimate of the same target: CD={center_distance(big, reference):.2f} cm, "
      f"IoU={iou(big, reference):.3f}, ESF={esf(big, reference):.1f}")
print("  -> CD is blind to size, IoU punishes both, ESF only punishes 'too small to enclose'")

flat = AxisAlignedBox([0, 0, 0], [0.02, 0.02, 0.0])
print(f"\n  degenerate flat estimate: ESF={esf(flat, reference)} (no finite inflation encloses a 3D box)")
