"""
    Tensor blob files: one JSON header line {"dtype":"f64","shape":[r,c]} and a newline, followed by raw
    little-endian IEEE 754 binary64 values in row-major order.
"""

import json
import os

import numpy as np

from dalip.errors import BlobFormatError
from dalip.numcore import as_tensor

BLOB_DTYPE = np.dtype("<f8")


def encode_blob(tensor):
    tensor = as_tensor(tensor)
    header = json.dumps({"dtype": "f64", "shape": list(tensor.shape)}, separators=(",", ":"))

    return header.encode("ascii") + b"\n" + tensor.astype(BLOB_DTYPE).tobytes(order="C")


def decode_blob(raw, source="<bytes>"):
    newline = raw.find(b"\n")

    if newline < 0:
        raise BlobFormatError(f"{source}: missing header line")

    try:
        header = json.loads(raw[:newline].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BlobFormatError(f"{source}: unreadable header ({e})")

    if not isinstance(header, dict) or header.get("dtype") != "f64":
        raise BlobFormatError(f"{source}: dtype must be 'f64', header was {header}")

    shape = header.get("shape")

    if not (isinstance(shape, list) and len(shape) == 2 and all(isinstance(n, int) and n >= 0 for n in shape)):
        raise BlobFormatError(f"{source}: shape must be two nonnegative integers, got {shape}")

    payload = raw[newline + 1:]
    expected = shape[0] * shape[1] * BLOB_DTYPE.itemsize

    if len(payload) != expected:
        raise BlobFormatError(f"{source}: payload has {len(payload)} bytes, shape {shape} needs {expected}")

    return as_tensor(np.frombuffer(payload, dtype=BLOB_DTYPE).reshape(shape))


def write_blob(path, tensor):
    """ Writes {tensor} to the blob file at {path}, creating parent directories """

    directory = os.path.dirname(path)

    if directory:
        os.makedirs(directory, exist_ok=True)

    with open(path, "wb") as bf:
        bf.write(encode_blob(tensor))


def read_blob(path):
    """ Reads the blob file at {path} into a Tensor """

    with open(path, "rb") as bf:
        return decode_blob(bf.read(), source=path)
