"""Log-mel features of a synthetic noisy utterance and how much survives the trip back.

The network only ever sees 64 mel bands, so even a perfect clean-speech
estimate is limited by mel smoothing and by reusing the noisy phase. This
script prints those ceilings next to the unprocessed mixture.
"""
import numpy as np

from rcunet import dsp
from rcunet.data import CorpusManifest, generate
from rcunet.metrics import bss_eval, stoi

manifest = CorpusManifest(seed=0, train_count=4, test_count=0)
utts = generate(manifest, "train")

print(f"{'id':12s} {'noise':8s} {'mixture':>8s} {'passthru':>9s} {'oracle':>8s} {'oracle+ph':>10s}")
for u in utts:
    mix = dsp.features(u.mixture)
    clean = dsp.features(u.clean)
    score = lambda w: bss_eval(w, u.clean, u.noise).sdr_db

    passthrough = dsp.reconstruct(mix.logmel, mix.phase, mix.length)
    # clean mel magnitudes with the noisy phase: best case for any mapping network
    oracle = dsp.reconstruct(clean.logmel, mix.phase, mix.length)
    # ... and with the clean phase, which isolates the mel smoothing loss
    oracle_phase = dsp.reconstruct(clean.logmel, clean.phase, clean.length)
    print(f"{u.id:12s} {u.noise_kind:8s} {score(u.mixture):8.2f} {score(passthrough):9.2f} "
          f"{score(oracle):8.2f} {score(oracle_phase):10.2f}")

u = utts[0]
spec = dsp.features(u.mixture)
print()
print("log-mel shape (bands, frames):", spec.logmel.shape)
print("range of clean log-mel:", np.round(np.percentile(dsp.features(u.clean).logmel, [0, 50, 100]), 2))
print("STOI mixture:", round(stoi(u.clean, u.mixture).score, 3))
