from pointgeom import core


def test_import():
    assert core
