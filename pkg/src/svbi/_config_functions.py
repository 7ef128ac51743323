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
"""Conversions between config documents and ConfigObject members."""
import re


def to_snake_case(name):
    """Convert a camelCase or kebab-case key to snake case.

    Args:
        name (str): String to convert to snake case.

    Returns:
        str: String converted to snake case.
    """
    name = name.replace("-", "_")
    s1 = re.sub("(.)([A-Z][a-z]+)", r"\1_\2", name)
    return re.sub("([a-z0-9])([A-Z])", r"\1_\2", s1).lower()


def from_config(config_dict, config_name_to_member_name, member_name_to_type):
    """Convert a config document to a dict of snake case member names.

    Args:
        config_dict (dict[str, ?]): A parsed config document.
        config_name_to_member_name (dict[str, str]): A map from document key to member name. Keys not in
            the map are converted to snake case.
        member_name_to_type (dict[str, (_base_types.ConfigObject, boolean)]): A map from member name to a type
            description tuple. The first element is the ConfigObject subclass of the member, the second
            whether the member is a collection.

    Returns:
        dict: Member values keyed by snake case name.
    """
    from_config_values = {}
    for config_name, config_value in config_dict.items():
        member_name = config_name_to_member_name.get(config_name, to_snake_case(config_name))

        if member_name in member_name_to_type and config_value is not None:
            config_type, is_collection = member_name_to_type[member_name]
            if is_collection:
                if isinstance(config_value, dict):
                    member_value = {key: config_type.from_dict(value) for key, value in config_value.items()}
                else:
                    member_value = [config_type.from_dict(item) for item in config_value]
            else:
                member_value = config_type.from_dict(config_value)
        else:
            member_value = config_value
        from_config_values[member_name] = member_value
    return from_config_values


def to_config(member_vars, member_name_to_config_name, member_name_to_type):
    """Convert a dict of member names to values into a config document.

    Members set to None are treated as unset and dropped.

    Args:
        member_vars (dict[str, ?]): A map from snake case name to value.
        member_name_to_config_name (dict[str, str]): A map from member name to document key.
        member_name_to_type (dict[str, (_base_types.ConfigObject, boolean)]): Member type descriptions.

    Returns:
        dict: The config document.
    """
    to_config_values = {}
    member_vars = {k: v for k, v in member_vars.items() if v is not None and not k.startswith("_")}

    for member_name, member_value in member_vars.items():
        config_name = member_name_to_config_name.get(member_name, member_name)
        config_type, is_collection = member_name_to_type.get(member_name, (None, None))
        if is_collection and isinstance(member_value, dict):
            config_value = {k: config_type.to_dict(v) if config_type else v for k, v in member_value.items()}
        elif is_collection and isinstance(member_value, (list, tuple)):
            config_value = [config_type.to_dict(v) if config_type else v for v in member_value]
        else:
            config_value = config_type.to_dict(member_value) if config_type else member_value
        if isinstance(config_value, tuple):
            config_value = list(config_value)
        to_config_values[config_name] = config_value
    return to_config_values
