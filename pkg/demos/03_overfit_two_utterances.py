"""Train a two-level ALL_RC net on two utterances until it memorizes them.

A sanity check of the whole training stack: loss should fall by an order of
magnitude and the run should be bit-for-bit repeatable.
"""
import time

from rcunet.data import CorpusManifest, generate
from rcunet.model import all_rc, count_params
from rcunet.train import TrainConfig, prepare, train

examples = prepare(generate(CorpusManifest(seed=0, train_count=2, test_count=0), "train"))
spec = all_rc(levels=2, features=16)
print(f"{count_params(spec)} parameters, frames per utterance: {[e.n_frames for e in examples]}")

t0 = time.perf_counter()


def show(rec):
    if rec.epoch == 1 or rec.epoch % 20 == 0:
        print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.4f}  SDR on the training pair {rec.val_sdr:6.2f} dB"
              f"  ({time.perf_counter() - t0:.0f} s)")


model, state = train(spec, examples, TrainConfig(epochs=200, seed=0), progress=show)
print(f"final / first loss = {state.losses[-1] / state.losses[0]:.4f}")
print(f"best SDR {state.best_val_sdr:.2f} dB at epoch {state.best_epoch}")
