from tallyho import core


def test_import():
    assert core
