from slugtools import core


def test_import():
    assert core
