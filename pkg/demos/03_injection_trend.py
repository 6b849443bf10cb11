"""
Does injecting detection maps help event recognition?
=====================================================

Stages 1 and 2 train the shared layers and all three branches once. Stage 3
then retrains only the event branch, either on its own maps or with the
batch-pooled detection maps concatenated at C7. Both variants start from the
same stage-2 network, so the injection is the only difference.

The default here is a shortened run (under a minute on one core). At this
size a single seed is noisy and the ordering can go either way; the 400/400
desk-scale setting over five seeds is the comparison that counts. Set
FULL = True to run one seed of it (a few minutes).
"""
import logging
import sys
import time
from dataclasses import replace

from dodcnn.synth_data import generate_split
from dodcnn.trainer import StageConfig, TrainConfig
from dodcnn.experiments import run_trend

FULL = False
SEED = 0

logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")

if FULL:
    n, config = 400, TrainConfig(seed=SEED, precision="float32")
else:
    n = 160
    config = replace(TrainConfig(seed=SEED, precision="float32"),
                     stages=(StageConfig(1, 0.001, 600, 360), StageConfig(2, 0.0001, 240, 144),
                             StageConfig(3, 0.0001, 240, 144, injection_enabled=True)))

t0 = time.perf_counter()
train = generate_split(n, SEED, "train")
test = generate_split(n, SEED, "test")
result = run_trend(train, test, config, sites=("none", "c7"))

print("event AP on %d test images" % n)
print("  stage 2 (no injection, temporary head): %.4f" % result.event_ap["iod"])
print("  stage 3 without injection:              %.4f" % result.event_ap["none"])
print("  stage 3 with injection at C7:           %.4f" % result.event_ap["c7"])
print("finished in %.0f s" % (time.perf_counter() - t0))
