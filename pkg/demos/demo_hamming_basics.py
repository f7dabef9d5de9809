"""
Packed hash codes and Hamming scores
====================================

A K-bit code of +1/-1 entries is stored as ceil(K/64) unsigned 64-bit
words. The inner product of two codes then needs no multiplication:
count the differing bits with XOR and popcount and use K - 2 * distance.
"""
import tempfile
from pathlib import Path

import numpy as np

from hamrec import CodeMatrix, hamming_distance, pack, read_codes, similarity_score, write_codes
from hamrec.hamming import code_file_size, to_hex

# Two 8-bit codes. Bit b sits at position b of the first word; +1 is a set bit.
a = pack([+1, -1, +1, +1, -1, -1, +1, -1])
b = pack([+1, +1, +1, -1, -1, -1, -1, -1])
print("a =", to_hex(a), " b =", to_hex(b))
print("distance", hamming_distance(a, b), " score", similarity_score(a, b))
print("dot product of the +-1 vectors:", int(a.unpack() @ b.unpack()))

# %%
# The same identity holds row by row for whole matrices of codes.
rng = np.random.default_rng(0)
signs = rng.choice([-1, 1], size=(5, 128))
codes = CodeMatrix.from_signs(signs)
query = codes[0]
packed_scores = [similarity_score(codes[r], query) for r in range(len(codes))]
float_scores = signs @ signs[0]
print("packed:", packed_scores)
print("float :", float_scores.tolist())

# %%
# Code files hold an 18-byte header followed by the little-endian words.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "codes.hsgc"
    write_codes(path, codes)
    print("file size", path.stat().st_size, "=", code_file_size(128, 5), "bytes")
    assert read_codes(path) == codes
