"""Independent xoshiro256** / splitmix64 reference used by the oracle scripts."""
import math

M = (1 << 64) - 1


def rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & M


def splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & M
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M
    return state, z ^ (z >> 31)


class Rng:
    def __init__(self, seed=None, state=None):
        if state is not None:
            self.s = list(state)
        else:
            st = seed & M
            self.s = []
            for _ in range(4):
                st, v = splitmix64(st)
                self.s.append(v)

    def next_u64(self):
        s = self.s
        result = (rotl((s[1] * 5) & M, 7) * 9) & M
        t = (s[1] << 17) & M
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        return result

    def uniform(self):
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_range(self, lo, hi):
        return lo + (hi - lo) * self.uniform()

    def below(self, n):
        return (self.next_u64() * n) >> 64

    def normal(self):
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


if __name__ == "__main__":
    r = Rng(state=[1, 2, 3, 4])
    print([r.next_u64() for _ in range(3)])
    print(hex(splitmix64(0)[1]))
