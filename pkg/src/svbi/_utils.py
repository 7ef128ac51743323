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
"""Small helpers shared across the package."""
import hashlib
import json
import os
import random
from datetime import datetime
from importlib import import_module

import numpy as np


def suffix():
    """Generate a timestamped suffix ending in 4 random letters."""
    alph = "abcdefghijklmnopqrstuvwxyz"
    return "-".join([datetime.utcnow().strftime("%Y-%m-%d-%H%M%S%f"), "".join(random.sample(alph, 4))])


def name(prefix):
    """Generate a new name with the specified prefix."""
    return "-".join([prefix, suffix()])


def get_module(module_name):
    """Imports a module.

    Args:
        module_name (str): Name of the module to import.

    Returns:
        [obj]: The imported module
    """
    return import_module(module_name)


def canonical_json(obj):
    """Serialize ``obj`` as canonical JSON (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config_dict):
    """Return the 16 hex character digest identifying a configuration.

    Args:
        config_dict (dict): A JSON serializable configuration.

    Returns:
        str: First 16 hex characters of the SHA-256 of the canonical JSON.
    """
    return hashlib.sha256(canonical_json(config_dict).encode("utf-8")).hexdigest()[:16]


def sha256_bytes(data):
    """Hex SHA-256 digest of a bytes object."""
    return hashlib.sha256(data).hexdigest()


def sha256_file(path, chunk_size=1 << 20):
    """Hex SHA-256 digest of a file's contents."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def seeded_rng(seed, *streams):
    """Create a numpy Generator for ``seed`` and an optional named sub-stream.

    Sub-streams let independent consumers (init, shuffling, noise) draw from the same seed
    without perturbing each other.

    Args:
        seed (int): The run seed.
        *streams (str): Names identifying the sub-stream.

    Returns:
        numpy.random.Generator
    """
    entropy = [int(seed)]
    for stream in streams:
        entropy.append(int(hashlib.sha256(str(stream).encode("utf-8")).hexdigest()[:8], 16))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def makedirs(path):
    """Create ``path`` and its parents if missing and return it."""
    os.makedirs(path, exist_ok=True)
    return path


def format_beta(beta):
    """Directory-safe rendering of a rate weight, e.g. ``0.005`` -> ``beta-0.005``."""
    return "beta-{}".format(repr(float(beta)))
