class Counter:
    def __init__(self):
        self.counts = {}

    def add(self, key):
        self.counts[key] = self.counts.get(key, 0) + 1

    def most_common(self, n=3):
        return sorted(self.counts.items(), key=lambda kv: -kv[1])[:n]
