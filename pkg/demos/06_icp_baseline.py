"""Template-matching baseline: localize structures without any network.

Build a small library of (surface cloud, reference boxes) templates, rigidly
perturb one of them to play the "patient", and let ICP registration pick the
best-matching template and carry its boxes over. In this optimal setting
(patient == moved template) the transfer is near-exact; the point of the
baseline is to show what rigid matching can and cannot do.

Run:  python3 demos/06_icp_baseline.py
"""

import numpy as np

from occatlas.baseline import RigidTransform, Template, icp_register, match_and_transfer
from occatlas.deform import rotation_matrix_xyz
from occatlas.metrics import center_distance, iou
from occatlas.phantom import PhantomSpec, extract_skin, generate_phantom
from occatlas.sensor import CameraPose, backproject, render_depth
from occatlas.volume import aabb_of_class

# --- library of 6 bodies ---------------------------------------------------
# Distinct body envelopes per template: with identical surfaces the matcher
# could not tell patients apart (only internal structures would differ, and
# those are invisible to the camera).
templates = []
for seed in range(6):
    rng = np.random.default_rng(seed)
    semi = tuple(np.array([0.21, 0.16, 0.52]) * rng.uniform(0.75, 1.0, 3))
    volume = generate_phantom(
        PhantomSpec(seed=seed, num_structures=5, envelope_semi_axes=semi)
    )
    idx = np.argwhere(np.asarray(volume.labels) > 0)
    center = volume.origin + volume.spacing * (0.5 * (idx.min(axis=0) + idx.max(axis=0) + 1))
    cloud = backproject(render_depth(extract_skin(volume), CameraPose(2.0, 0.0, 0.0, center)), seed=seed)
    boxes = {c: aabb_of_class(volume, c) for c in range(1, 6)}
    templates.append(Template(f"body_{seed}", cloud, boxes))
print(f"library: {len(templates)} templates, {len(templates[0].cloud.points)} points each")

# --- a 'patient': template 4, rigidly moved --------------------------------
true = RigidTransform(rotation_matrix_xyz((7.0, -4.0, 11.0)), np.array([0.06, -0.02, 0.04]))
patient = templates[4].cloud.__class__(true.inverse().apply(templates[4].cloud.points))

result = icp_register(patient, templates[4].cloud)
angle_err = np.degrees(
    np.arccos(np.clip((np.trace(result.transform.rotation @ true.rotation.T) - 1) / 2, -1, 1))
)
print(f"\nICP vs. ground truth: {angle_err:.4f} deg rotation error, "
      f"{1000 * np.linalg.norm(result.transform.translation - true.translation):.3f} mm translation error")

boxes, winner, score = match_and_transfer(patient, templates)
print(f"selected template: {winner} (chamfer {score * 1000:.3f} mm)")

print("\ntransferred boxes vs. moved ground truth:")
for c in range(1, 6):
    ref = templates[4].boxes[c]
    moved = true.inverse().apply(ref.corners())
    truth = type(ref)(moved.min(axis=0), moved.max(axis=0))
    print(f"  class {c}: CD {center_distance(boxes[c], truth):6.3f} cm, IoU {iou(boxes[c], truth):.3f}")
