from batchify import core


def test_import():
    assert core
