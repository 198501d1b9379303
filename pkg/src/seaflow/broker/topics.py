"""MQTT 3.1.1 topic names and filters."""

from __future__ import annotations


class InvalidTopic(ValueError):
    pass


def validate_topic(topic: str) -> None:
    if not topic:
        raise InvalidTopic("topic must not be empty")
    if "+" in topic or "#" in topic:
        raise InvalidTopic(f"wildcards not allowed in topic name: {topic!r}")
    if "\x00" in topic:
        raise InvalidTopic("topic must not contain NUL")


def validate_filter(topic_filter: str) -> None:
    if not topic_filter:
        raise InvalidTopic("filter must not be empty")
    if "\x00" in topic_filter:
        raise InvalidTopic("filter must not contain NUL")
    levels = topic_filter.split("/")
    for i, level in enumerate(levels):
        if "#" in level and (level != "#" or i != len(levels) - 1):
            raise InvalidTopic(f"'#' must be the whole, final level: {topic_filter!r}")
        if "+" in level and level != "+":
            raise InvalidTopic(f"'+' must occupy a whole level: {topic_filter!r}")


def match_filter(topic_filter: str, topic: str) -> bool:
    """True iff ``topic`` matches ``topic_filter`` under MQTT wildcard rules.

    ``a/#`` also matches the parent ``a``. Topics starting with ``$`` are
    not matched by a leading wildcard.
    """
    if topic.startswith("$") and topic_filter[:1] in ("+", "#"):
        return False
    f_levels = topic_filter.split("/")
    t_levels = topic.split("/")
    for i, f in enumerate(f_levels):
        if f == "#":
            return True
        if i >= len(t_levels):
            return False
        if f != "+" and f != t_levels[i]:
            return False
    return len(t_levels) == len(f_levels)


def filter_covers(scope: str, topic_filter: str) -> bool:
    """True iff every topic matched by ``topic_filter`` is also matched by ``scope``."""
    s_levels = scope.split("/")
    f_levels = topic_filter.split("/")
    for i, s in enumerate(s_levels):
        if s == "#":
            return True
        if i >= len(f_levels):
            return False
        f = f_levels[i]
        if f == "#":
            return False
        if s == "+":
            continue
        if f == "+" or f != s:
            return False
    return len(f_levels) == len(s_levels)
