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
"""Base class for configuration and report value objects."""
import json

from svbi import _config_functions, _utils


class ConfigObject(object):
    """
    A Python class representation of a config document. Converts dicts of 'camelCase', 'kebab-case' or
    'snake_case' keys into/from a Python object with standard python members. Members default to the
    class-level attribute of the same name.
    """

    # A map from document key to member name. Keys absent from this dict are converted to snake_case.
    _custom_config_names = {}

    # A map from member name to a (ConfigObject subclass, is_collection) tuple.
    _custom_types = {}

    def __init__(self, **kwargs):
        self.__dict__.update(kwargs)

    @classmethod
    def from_dict(cls, config_dict, **kwargs):
        """Construct an instance of this ConfigObject from a config document.

        Args:
            config_dict (dict): The parsed document.
            **kwargs: Members overriding the document.
        """
        if isinstance(config_dict, cls):
            return config_dict
        custom_names_to_member_names = {a: b for b, a in cls._custom_config_names.items()}
        cls_kwargs = _config_functions.from_config(config_dict, custom_names_to_member_names, cls._custom_types)
        cls_kwargs.update(kwargs)
        return cls(**cls_kwargs)

    @classmethod
    def to_dict(cls, obj):
        """Convert an object to a config document.

        Args:
            obj (ConfigObject or dict): The object to convert.
        """
        if not isinstance(obj, dict):
            var_dict = {k: getattr(obj, k) for k in _public_members(obj)}
        else:
            var_dict = obj
        return _config_functions.to_config(var_dict, cls._custom_config_names, cls._custom_types)

    @classmethod
    def from_json(cls, path, **kwargs):
        """Load an instance from a JSON file."""
        with open(path) as f:
            return cls.from_dict(json.load(f), **kwargs)

    def to_json(self, path):
        """Write this object as indented JSON with sorted keys."""
        with open(path, "w") as f:
            json.dump(type(self).to_dict(self), f, indent=2, sort_keys=True)
            f.write("\n")

    def replace(self, **changes):
        """Return a copy of this object with ``changes`` applied."""
        members = {k: getattr(self, k) for k in _public_members(self)}
        members.update(changes)
        return type(self)(**members)

    def config_hash(self):
        """Digest of the canonical JSON form of this object."""
        return _utils.config_hash(type(self).to_dict(self))

    def __eq__(self, other):
        """Returns true if this ConfigObject equals other."""
        if isinstance(other, self.__class__):
            return type(self).to_dict(self) == type(other).to_dict(other)
        return False

    def __ne__(self, other):
        """Returns true if this ConfigObject does not equal other."""
        return not self.__eq__(other)

    def __hash__(self):
        """Returns a hashcode for this ConfigObject."""
        return hash(_utils.canonical_json(type(self).to_dict(self)))

    def __repr__(self):
        """Returns a string representation of this ConfigObject."""
        return "{}({})".format(
            type(self).__name__,
            ",".join(["{}={}".format(k, repr(getattr(self, k))) for k in _public_members(self)]),
        )


def _public_members(obj):
    """Member names from the class defaults and the instance, in declaration order."""
    names = []
    for klass in reversed(type(obj).__mro__):
        for key, value in vars(klass).items():
            if key.startswith("_") or callable(value) or isinstance(value, (classmethod, staticmethod, property)):
                continue
            if key not in names:
                names.append(key)
    for key in vars(obj):
        if not key.startswith("_") and key not in names:
            names.append(key)
    return names
