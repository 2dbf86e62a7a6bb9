#!/usr/bin/env python3
# %% [markdown]
# # Alignment, landmark cells and landmark pairs
#
# A face enters as 68 detected landmarks. Alignment rotates the eye line
# horizontal and scales the face so the eyes sit on row 42 and the mouth
# on row 91 of a 140 pixel crop. Each aligned landmark then names one cell
# of the backbone feature map, and every unordered pair of landmarks feeds
# the relation network.

# %%
import numpy as np

from prnface.geometry import LandmarkSet, RoiSpec, align_face, landmark_cells
from prnface.harness.data import canonical_face
from prnface.prn import aggregate, enumerate_pairs

rng = np.random.default_rng(0)

# %% a tilted, shifted face in a 400x400 frame
angle = 0.4
c, s = np.cos(angle), np.sin(angle)
raw = 90.0 * canonical_face() @ np.array([[c, s], [-s, c]]) + (230.0, 180.0)
raw += rng.normal(0.0, 1.0, size=raw.shape)

transform, aligned = align_face(LandmarkSet(raw), 140)
print("transform:", transform.record())
print("eye row   %.6f" % aligned.centroid("left_eye", "right_eye")[1])
print("mouth row %.6f" % aligned.centroid("mouth")[1])

# %% turning the input first changes nothing after alignment
phi = 1.3
c, s = np.cos(phi), np.sin(phi)
turned = (raw - 200.0) @ np.array([[c, s], [-s, c]]) + 200.0
_, again = align_face(LandmarkSet(turned), 140)
print("max difference after pre-rotation: %.2e px" % np.abs(again.points - aligned.points).max())

# %% landmark -> feature map cell, at the full-scale 9x9 grid
cells = landmark_cells(aligned.points, RoiSpec(input_size=140, fmap_size=9))
print("eye corner cells:", cells[36].tolist(), cells[45].tolist())
print("distinct cells used by 68 landmarks:", len({tuple(c) for c in cells.tolist()}))

# %% pairs and their order-free sum
pairs = enumerate_pairs(68)
print(len(pairs), "pairs, first", pairs[0], "last", pairs[-1])

relations = {p: rng.normal(size=4) for p in pairs}
shuffled = [(pairs[k], relations[pairs[k]]) for k in rng.permutation(len(pairs))]
same = aggregate(relations).tobytes() == aggregate(shuffled).tobytes()
print("sum over shuffled relations bit-identical:", same)
