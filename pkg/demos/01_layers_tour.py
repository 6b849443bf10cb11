"""
A tour of the detection layers
==============================

RoI pooling, the top-k RoI sampler, batch pooling with its stop-gradient and
channel concatenation, each on small hand-made inputs.
"""
import numpy as np

from dodcnn.boxes import Box
from dodcnn.detection_layers import RoiBatch, batch_pool, channel_concat, roi_pool, roi_sampler
from dodcnn.tensor import Tensor, fully_connected, global_avg_pool, softmax_cross_entropy

rng = np.random.default_rng(0)

# RoI pooling splits a box into a grid of near-equal cells and keeps each cell's max.
fm = Tensor(np.arange(49.0).reshape(1, 7, 7), requires_grad=True)
pooled = roi_pool(fm, Box(0, 0, 7, 7), 3, 3)
print("3x3 RoI pool of a 7x7 ramp:\n", pooled.data[0])

# The sampler keeps the k highest-scoring RoIs; equal scores go to the lower index.
scores = [0.9, 0.1, 0.8, 0.8, 0.2]
maps = [Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True) for _ in scores]
batch = RoiBatch(maps, scores, [Box(i, 0, i + 4, 4) for i in range(5)])
top = roi_sampler(batch, 3)
print("sampled scores:", top.scores)

# Batch pooling takes the elementwise max over the sampled maps ...
merged = batch_pool(top)
stacked = np.stack([m.data for m in top.maps])
print("batch pool equals the elementwise max:", np.array_equal(merged.data, stacked.max(axis=0)))

# ... and joins the event map along channels. A loss on the event head trains
# the event map, yet the detection maps behind the batch pool receive nothing.
event_map = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
joined = channel_concat([event_map, merged])
print("channels after concatenation:", joined.shape[0])
w = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)
loss = softmax_cross_entropy(fully_connected(global_avg_pool(joined), w, b), 1)
loss.backward()
print("event map gradient norm: %.4f" % np.linalg.norm(event_map.grad))
print("largest |gradient| reaching a sampled detection map:", max(np.abs(m.grad).max() for m in top.maps))
