"""Parameter counts and receptive fields of the six canonical U-nets.

The symbolic receptive field is computed from the layer list; the empirical
one comes from back-propagating a single output element to the input.
"""
import time

from rcunet.model import canonical_archs, count_params, describe, receptive_field
from rcunet.model.probe import gradient_footprint

archs = canonical_archs()
print(describe(archs["ALL_RC"]))
print()

print(f"{'name':8s} {'params':>9s} {'symbolic':>14s} {'measured':>10s} {'secs':>6s}")
for name, spec in archs.items():
    t0 = time.perf_counter()
    fp = gradient_footprint(spec, n_bands=64, n_frames=64)
    print(f"{name:8s} {count_params(spec):9d} {str(receptive_field(spec)):>14s} {str(fp):>10s} "
          f"{time.perf_counter() - t0:6.1f}")

# the measured footprint is clipped to the 64x64 probe, so "full" shows up as (64, 64)
