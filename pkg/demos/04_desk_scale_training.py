"""ALL_RC against the plain C48 U-net on the default synthetic corpus.

64 training / 16 test utterances at 0 dB, 30 epochs each. On one CPU core
this takes well over an hour; pass --quick for a 5-epoch run on 16 utterances.
"""
import sys
import time

import numpy as np

from rcunet.data import CorpusManifest, generate
from rcunet.metrics import bss_eval, stoi
from rcunet.train import TrainConfig, enhance, prepare, train

quick = "--quick" in sys.argv
manifest = CorpusManifest(seed=0, train_count=16 if quick else 64, test_count=4 if quick else 16)
epochs = 5 if quick else 30

train_ex = prepare(generate(manifest, "train"))
test = generate(manifest, "test")


def scores(est_of):
    rows = []
    for u in test:
        est = est_of(u)
        rows.append((bss_eval(est, u.clean, u.noise).sdr_db, stoi(u.clean, est).score))
    return np.mean(rows, axis=0)


results = {"mixture": scores(lambda u: u.mixture)}
for name in ("ALL_RC", "C48"):
    t0 = time.perf_counter()
    model, state = train(name, train_ex, TrainConfig(epochs=epochs, seed=0, batch_size=3),
                         progress=lambda r: print(f"  {name} epoch {r.epoch:2d} loss {r.train_loss:.4f} "
                                                  f"val SDR {r.val_sdr:.2f}", flush=True))
    results[name] = scores(lambda u: enhance(model, u.mixture))
    print(f"{name}: {time.perf_counter() - t0:.0f} s")

print()
print(f"{'':8s} {'SDR':>7s} {'STOI':>6s}")
for name, (sdr, st) in results.items():
    print(f"{name:8s} {sdr:7.2f} {st:6.3f}")
