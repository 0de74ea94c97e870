"""Build a trajectory by hand and render it as mask, box and sparse-box conditions."""
import numpy as np

from trajvid.stages import make_condition
from trajvid.trajgeo import mask_to_rle, sparsify, trajectory_to_json, tracks_from_masks

T, H, W = 12, 32, 48

# two squares: one sliding right, one sliding down
a = np.zeros((T, H, W), bool)
b = np.zeros((T, H, W), bool)
for t in range(T):
    a[t, 4:10, 2 + 3 * t:8 + 3 * t] = True
    b[t, 1 + 2 * t:7 + 2 * t, 30:36] = True

ts = tracks_from_masks([a, b])
print("objects:", ts.object_count, "colors:", [tr.color for tr in ts.tracks])

mask_video = make_condition(ts, "mask")
box_video = make_condition(ts, "box")
sparse_video = make_condition(ts, "sparse_box", sparsity_k=4)

# frame 0 always carries the dense masks
print("frame 0 identical across kinds:",
      np.array_equal(mask_video[0], box_video[0]) and np.array_equal(mask_video[0], sparse_video[0]))

sparse = sparsify(ts, 4)
print("sparse keyframes per track:", [tr.frame_indices for tr in sparse.tracks])
lit = sparse_video.reshape(T, -1).any(axis=1)
print("non-black frames in the sparse condition:", np.nonzero(lit)[0].tolist())

doc = trajectory_to_json(sparse)
print("first-frame mask RLE (truncated):", mask_to_rle(a[0])[:40], "...")
print("JSON keys:", sorted(doc))
