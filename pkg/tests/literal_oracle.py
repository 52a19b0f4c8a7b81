"""Exhaustive minimum for set-then-increment literal synthesis."""
from rvjop.planner import MAX_REPEAT


def reachable(setters, incrementers, limit, bound=MAX_REPEAT):
    """value -> fewest table entries, by enumerating every (setter, incrementer, count)."""
    best = {}
    for c in setters:
        if 0 <= c <= limit:
            best[c] = 1
        for k in incrementers:
            for n in range(1, bound + 1):
                v = c + n * k
                if v < 0 or v > limit:
                    break
                if n + 1 < best.get(v, n + 2):
                    best[v] = n + 1
    return best


def brute_force_min(target, setters, incrementers, bound=MAX_REPEAT):
    return reachable(setters, incrementers, target, bound).get(target)
