# Copyright The SVBI Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License"). You
# may not use this file except in compliance with the License. A copy of
# the License is located at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# or in the "license" file accompanying this file. This file is
# distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF
# ANY KIND, either express or implied. See the License for the specific
# language governing permissions and limitations under the License.
import os
import re

import numpy as np

from svbi import _utils


def test_suffix():
    assert re.match(r"^\d{4}-\d{2}-\d{2}-\d{12}-[a-z]{4}$", _utils.suffix())


def test_name():
    assert _utils.name("train").startswith("train-")
    assert _utils.name("train") != _utils.name("train")


def test_get_module():
    assert np is _utils.get_module("numpy")


def test_canonical_json():
    assert '{"a":[1,2],"b":1}' == _utils.canonical_json({"b": 1, "a": [1, 2]})


def test_config_hash_ignores_key_order():
    first = _utils.config_hash({"seed": 0, "beta": 0.1})
    assert first == _utils.config_hash({"beta": 0.1, "seed": 0})
    assert 16 == len(first)
    assert re.match(r"^[0-9a-f]{16}$", first)
    assert first != _utils.config_hash({"beta": 0.2, "seed": 0})


def test_sha256_file(tempdir):
    path = os.path.join(tempdir, "blob.bin")
    with open(path, "wb") as f:
        f.write(b"x" * 3000)
    assert _utils.sha256_bytes(b"x" * 3000) == _utils.sha256_file(path, chunk_size=1024)


def test_sha256_bytes_known_value():
    expected = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert expected == _utils.sha256_bytes(b"")


def test_seeded_rng_reproducible():
    np.testing.assert_array_equal(_utils.seeded_rng(3, "init").random(5), _utils.seeded_rng(3, "init").random(5))


def test_seeded_rng_streams_are_independent():
    init = _utils.seeded_rng(3, "init").random(5)
    noise = _utils.seeded_rng(3, "noise").random(5)
    other_seed = _utils.seeded_rng(4, "init").random(5)
    assert not np.allclose(init, noise)
    assert not np.allclose(init, other_seed)


def test_makedirs(tempdir):
    path = os.path.join(tempdir, "a", "b")
    assert path == _utils.makedirs(path)
    assert path == _utils.makedirs(path)
    assert os.path.isdir(path)


def test_format_beta():
    assert "beta-0.005" == _utils.format_beta(0.005)
    assert "beta-0.0" == _utils.format_beta(0)
    assert "beta-1.0" == _utils.format_beta(1)
