"""
The spatial transformer's sampler
=================================

The transformer warps its input with a 4-parameter similarity transform
(angle, scale, two translations).  Here the grid and sampler are driven by
hand: a quarter turn reproduces ``np.rot90``, the identity is exact, and
gradients reach the transform parameters.
"""
import numpy as np

from patchdesc import stn
from patchdesc.stn import AffineParams4

rng = np.random.default_rng(0)
patch = rng.standard_normal((1, 1, 9, 9))

# identity: every output pixel samples exactly one input pixel centre
grid = stn.grid_generator(np.array([stn.IDENTITY_RAW]), 9, 9)
out, _ = stn.bilinear_sample_forward(patch, grid)
print("identity reproduces input:", np.array_equal(out, patch))

# a quarter turn lands on the pixel lattice again
grid = stn.grid_generator(AffineParams4(theta=np.pi / 2), 9, 9)
out, _ = stn.bilinear_sample_forward(patch, grid)
print("quarter turn equals rot90:", np.allclose(out[0, 0], np.rot90(patch[0, 0])))

# zoom in by 2 around the centre; samples fall between pixels and get interpolated
grid = stn.grid_generator(AffineParams4(scale=0.5), 9, 9)
out, cache = stn.bilinear_sample_forward(patch, grid)
print("centre pixel unchanged by zoom:", np.isclose(out[0, 0, 4, 4], patch[0, 0, 4, 4]))

# gradient of the mean output with respect to the (angle, scale, tx, ty) parameters
raw = np.array([[0.1, 0.9, 0.05, -0.02]])
affine = stn.raw_to_affine(raw)
grid = stn.grid_generator(affine, 9, 9)
out, cache = stn.bilinear_sample_forward(patch, grid)
_, dgrid = stn.bilinear_sample_backward(np.full(out.shape, 1 / out.size), cache)
draw = stn.raw_to_affine_backward(stn.grid_generator_backward(dgrid, affine), raw)
print("d mean / d (angle, scale, tx, ty):", np.round(draw[0], 4))
