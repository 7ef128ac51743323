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

import pytest

from svbi import _base_types


class Inner(_base_types.ConfigObject):
    some_value = 1


class Outer(_base_types.ConfigObject):
    _custom_types = {"inner_value": (Inner, False), "inner_list": (Inner, True)}

    inner_value = Inner()
    inner_list = ()
    rate = 0.5


def test_from_dict_snake_cases_keys():
    obj = _base_types.ConfigObject.from_dict({"SomeValue": 10, "other-value": 2})
    assert 10 == obj.some_value
    assert 2 == obj.other_value


def test_to_dict_drops_none():
    assert {"a": 10} == _base_types.ConfigObject.to_dict({"a": 10, "b": None})


def test_defaults_from_class_members():
    obj = Outer()
    assert 0.5 == obj.rate
    assert Inner(some_value=1) == obj.inner_value


def test_custom_type():
    obj = Outer.from_dict(dict(innerValue=dict(someValue=10)))

    assert obj.inner_value == Inner(some_value=10)
    assert {"some_value": 10} == Outer.to_dict(obj)["inner_value"]


def test_custom_type_list():
    obj = Outer.from_dict(dict(inner_list=[dict(some_value=10), dict(some_value=11)]))

    assert obj.inner_list == [Inner(some_value=10), Inner(some_value=11)]
    assert [{"some_value": 10}, {"some_value": 11}] == Outer.to_dict(obj)["inner_list"]


def test_custom_type_dict():
    obj = Outer.from_dict(dict(inner_list={"key_1": dict(some_value=10), "key_2": dict(some_value=11)}))

    assert obj.inner_list == {"key_1": Inner(some_value=10), "key_2": Inner(some_value=11)}
    assert {"key_1": {"some_value": 10}, "key_2": {"some_value": 11}} == Outer.to_dict(obj)["inner_list"]


def test_tuples_become_lists():
    assert {"values": [1, 2]} == _base_types.ConfigObject.to_dict({"values": (1, 2)})


def test_replace_returns_copy():
    obj = Outer(rate=0.1)
    changed = obj.replace(rate=0.2)
    assert 0.1 == obj.rate
    assert 0.2 == changed.rate
    assert obj.inner_value == changed.inner_value


def test_config_hash_is_stable_and_sensitive():
    assert Outer(rate=0.1).config_hash() == Outer(rate=0.1).config_hash()
    assert Outer(rate=0.1).config_hash() != Outer(rate=0.2).config_hash()
    assert 16 == len(Outer().config_hash())


def test_equality_and_hash():
    assert Outer(rate=0.1) == Outer(rate=0.1)
    assert Outer(rate=0.1) != Outer(rate=0.2)
    assert hash(Outer(rate=0.1)) == hash(Outer(rate=0.1))
    assert Outer() != Inner()


def test_json_round_trip(tempdir):
    path = os.path.join(tempdir, "outer.json")
    obj = Outer(rate=0.25, inner_list=[Inner(some_value=3)])
    obj.to_json(path)
    assert obj == Outer.from_json(path)


def test_from_dict_kwargs_override():
    obj = Outer.from_dict({"rate": 0.1}, rate=0.9)
    assert 0.9 == obj.rate


def test_from_dict_passes_instances_through():
    obj = Outer(rate=0.3)
    assert obj is Outer.from_dict(obj)


def test_repr_lists_members():
    assert "rate=0.5" in repr(Outer())


@pytest.mark.parametrize(
    "key,expected", [("camelCase", "camel_case"), ("kebab-case", "kebab_case"), ("snake", "snake")]
)
def test_to_snake_case(key, expected):
    from svbi import _config_functions

    assert expected == _config_functions.to_snake_case(key)
