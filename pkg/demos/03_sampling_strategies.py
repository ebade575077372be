"""Why the outside-sampling rule matters for embedded structures.

The original labeling algorithm draws candidate points in a structure's
enlarged bounding box and throws away outside candidates that land inside
*another* structure. For a structure that is completely wrapped by its host
there is no free space nearby, so the outside set never fills: the loop
provably cannot terminate. The revised rule keeps those points and labels
them with the structure that contains them, which both terminates and gives
the network the "what surrounds me" signal.

Run:  python3 demos/03_sampling_strategies.py
"""

import time

import numpy as np

from occatlas.phantom import PhantomSpec, generate_phantom
from occatlas.sortsample import NonTermination, sort_sample_original, sort_sample_revised

volume = generate_phantom(PhantomSpec(seed=0, num_structures=5, packing="touching"))

for class_id in range(2, 6):
    # --- original rule: budget-capped draw loop --------------------------
    t0 = time.time()
    result = sort_sample_original(
        volume, class_id, n=32, rng=np.random.default_rng(0), max_draws=200_000
    )
    took = time.time() - t0
    if isinstance(result, NonTermination):
        print(
            f"class {class_id}: ORIGINAL gave up after {result.draws} draws "
            f"({result.num_inside} inside, {result.num_outside} outside kept, {took:.1f}s)"
        )
    else:
        print(f"class {class_id}: ORIGINAL terminated (structure not fully embedded)")

    # --- revised rule ------------------------------------------------------
    t0 = time.time()
    samples = sort_sample_revised(volume, class_id, n=32, rng=np.random.default_rng(0))
    took = time.time() - t0
    hosts = np.bincount(samples.outside_labels, minlength=6)
    host_desc = ", ".join(f"{c}:{k}" for c, k in enumerate(hosts) if k)
    print(
        f"class {class_id}: revised  -> 32+32 samples in {took:.2f}s, "
        f"outside labels {{{host_desc}}}, "
        f"|sdf| <= {np.abs(samples.all_sdf()).max() * 100:.2f} cm"
    )

    # Every label agrees with a direct voxel lookup.
    oracle = volume.label_at(samples.all_points())
    assert np.array_equal(oracle, samples.all_labels()), "label/oracle mismatch"
print("\nall revised labels verified against the voxel oracle")
