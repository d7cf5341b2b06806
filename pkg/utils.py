import logging
import os

import numpy as np

import tensor_core as tc


def bilinear_matrix(n_in, n_out):
    """Row-stochastic [n_out, n_in] interpolation matrix, half-pixel centres."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(x, height, width):
    """Bilinear resize of a [B,C,h,w] tensor, written as two matmuls so it stays differentiable."""
    _, _, h, w = x.shape
    if (h, w) == (height, width):
        return x
    rows = tc.Tensor(bilinear_matrix(h, height))
    cols = tc.Tensor(bilinear_matrix(w, width).T)
    return tc.matmul(tc.matmul(rows, x), cols)


def tokens_to_image(x, height, width):
    """[B, h*w, D] -> [B, D, h, w]"""
    b, n, d = x.shape
    return tc.permute(tc.reshape(x, (b, height, width, d)), (0, 3, 1, 2))


def image_to_tokens(x):
    """[B, D, h, w] -> [B, h*w, D]"""
    b, d, h, w = x.shape
    return tc.reshape(tc.permute(x, (0, 2, 3, 1)), (b, h * w, d))


def rescale_to_u8(arr):
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.rint((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, arr):
    """Binary (P5) greyscale image, values linearly rescaled to 0-255."""
    pixels = rescale_to_u8(arr)
    height, width = pixels.shape
    with open(path, 'wb') as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode('ascii'))
        fh.write(pixels.tobytes())
    return path


def read_pgm(path):
    with open(path, 'rb') as fh:
        raw = fh.read()
    magic, dims, _, payload = raw.split(b'\n', 3)
    if magic != b'P5':
        raise ValueError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(payload, dtype=np.uint8)[:width * height].reshape(height, width)


def parse_int_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(' ', '').split(',') if v)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    logging.debug(f"Output directory ready: {path}")
    return path
