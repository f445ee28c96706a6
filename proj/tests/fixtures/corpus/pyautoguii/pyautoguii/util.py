import logging

log = logging.getLogger(__name__)


def chunked(items, size):
    for start in range(0, len(items), size):
        log.debug('chunk at %d', start)
        yield items[start:start + size]
