"""
Synthetic malicious and benign scenes
=====================================

Malicious scenes carry solid glyphs (the rigid objects) and textured blobs
(the non-rigid ones); benign scenes only carry hollow distractors. This script
generates a few scenes, checks how well the sliding-window proposals cover the
rigid objects, and writes a small dataset to a temporary directory.
"""
import tempfile
from pathlib import Path

import numpy as np

from dodcnn.evaluation import average_precision
from dodcnn.synth_data import (NONRIGID_NAMES, RIGID_NAMES, SceneConfig, generate_split, make_manifest,
                               proposal_recall, propose_rois, read_dataset, write_dataset)

items = generate_split(200, seed=0, split="train")

img, ann = items[1]
print("scene 1 is", "malicious" if ann.event_label else "benign")
for cls, box in ann.rigid_objects:
    print("  rigid    %-7s" % RIGID_NAMES[cls], box.as_tuple())
for cls, box in ann.nonrigid_objects:
    print("  nonrigid %-7s" % NONRIGID_NAMES[cls], box.as_tuple())

# Proposals: dense square windows for rigid objects, five fixed windows for non-rigid ones.
print("rigid proposals per image:", len(propose_rois(img, "rigid")))
print("non-rigid proposals per image:", len(propose_rois(img, "nonrigid")))
print("rigid objects covered at IoU > 0.5: %.3f" % proposal_recall(items))

# A classifier that simply counts annotated objects already separates the events,
# so a network that finds the objects has everything it needs.
counts = [len(a.rigid_objects) + len(a.nonrigid_objects) for _, a in items]
labels = [a.event_label for _, a in items]
print("event AP of the object-count oracle: %.3f" % average_precision(counts, labels))

with tempfile.TemporaryDirectory() as tmp:
    splits = {"train": items[:20], "test": items[20:30]}
    write_dataset(tmp, make_manifest(splits, 0, SceneConfig()), splits)
    size = sum(p.stat().st_size for p in Path(tmp).rglob("*") if p.is_file())
    manifest, back = read_dataset(tmp)
    same = all(np.array_equal(a[0], b[0]) and a[1] == b[1] for a, b in zip(splits["train"], back["train"]))
    print("wrote %d bytes; round trip exact: %s" % (size, same))
