# %% [markdown]
# # Motion fields and the binary formats
#
# Motion grids travel as small binary files. Tensors and checkpoints use a
# sectioned format. Both round-trip bit for bit.

# %%
import tempfile
from pathlib import Path

import numpy as np

from vtm.motion import load_motion, save_motion, synth_motion
from vtm.tensorfile import read_sections, write_sections

grid = synth_motion("camera_pan", (4, 6, 6), {"box": (2, 2), "global": 2.0}, seed=0)
print(grid[0])

with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "pan.bin"
    save_motion(path, grid)
    print("motion round trip exact:", np.array_equal(load_motion(path), grid))
    write_sections(Path(d) / "ckpt.vtm", {"w": np.eye(3, dtype=np.float32), "b": np.zeros(3)})
    print({k: v.shape for k, v in read_sections(Path(d) / "ckpt.vtm").items()})
