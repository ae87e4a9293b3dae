"""Independent re-implementation of the sin-task MLP run.

Mirrors the data generation, initialisation, batch sampling and SGD update
order of the trainer with plain Python floats, so its losses can be pinned
as golden values. Usage: python3 mlp_sin.py [schedule.jsonl]
"""
import json
import math
import sys

from xoshiro import Rng

HIDDEN = 32
BATCH = 32
TRAIN = 256
VAL = 128
NOISE = 0.1
CHUNK = 32


def examples(rng, n):
    out = []
    for _ in range(n):
        x = rng.uniform_range(-1.0, 1.0)
        y = math.sin(3.0 * x) + NOISE * rng.normal()
        out.append((x, y))
    return out


def init(rng):
    def layer(rows, cols):
        bound = 1.0 / math.sqrt(cols)
        w = [rng.uniform_range(-bound, bound) for _ in range(rows * cols)]
        b = [rng.uniform_range(-bound, bound) for _ in range(rows)]
        return w, b

    w1, b1 = layer(HIDDEN, 1)
    w2, b2 = layer(1, HIDDEN)
    return [w1, b1, w2, b2]


def predict(p, x):
    w1, b1, w2, b2 = p
    h = []
    for r in range(HIDDEN):
        z = 0.0
        z += w1[r] * x
        z += b1[r]
        h.append(math.tanh(z))
    y = 0.0
    for c in range(HIDDEN):
        y += w2[c] * h[c]
    y += b2[0]
    return y, h


def val_mse(p, val):
    total = 0.0
    for i in range(0, len(val), CHUNK):
        acc = 0.0
        for x, y in val[i:i + CHUNK]:
            e = predict(p, x)[0] - y
            acc = acc + e * e
        total = total + acc
    return total / len(val)


def grad(p, batch):
    w1, b1, w2, b2 = p
    g = [[0.0] * len(t) for t in p]
    loss = 0.0
    for x, y in batch:
        yhat, h = predict(p, x)
        err = yhat - y
        d = 2.0 * err
        for c in range(HIDDEN):
            g[2][c] += d * h[c]
        g[3][0] += d
        for c in range(HIDDEN):
            s = 0.0
            s += w2[c] * d
            dz = s * (1.0 - h[c] * h[c])
            g[0][c] += dz * x
            g[1][c] += dz
        loss += err * err
    n = float(len(batch))
    # Chunk buffer added onto zeros, then divided.
    g = [[(0.0 + v) / n for v in t] for t in g]
    return (0.0 + loss) / n, g


def run(steps, lr0, anneal, schedule, seed=0, eval_every=100):
    rng = Rng(seed=seed)
    train = examples(rng, TRAIN)
    val = examples(rng, VAL)
    p = init(rng)
    v = [[0.0] * len(t) for t in p]
    lr = lr0
    annealing = anneal
    curve = []
    for step in range(steps):
        if step in schedule:
            lr = schedule[step]
            annealing = False
        if annealing:
            lr = lr0 * (1.0 - step / steps)
        batch = []
        for _ in range(BATCH):
            u = rng.uniform() * 1.0
            _ = u
            batch.append(train[rng.below(TRAIN)])
        loss, g = grad(p, batch)
        for t in range(4):
            for i in range(len(p[t])):
                v[t][i] = 0.0 * v[t][i] + g[t][i] + 0.0 * p[t][i]
                p[t][i] -= lr * v[t][i]
        if (step + 1) % eval_every == 0:
            curve.append((step + 1, loss, val_mse(p, val), lr))
    return val_mse(p, val), curve


def load_schedule(path):
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            e = json.loads(line)
            if e["command"] == "update_optimizer":
                out[e["at_step"]] = e["args"]["lr"]["value"]
    return out


if __name__ == "__main__":
    steps = 2000
    base, _ = run(steps, 1e-5, True, {})
    sched = load_schedule(sys.argv[1]) if len(sys.argv) > 1 else {}
    inter, curve = run(steps, 1e-5, True, sched)
    for row in curve:
        print("step %5d train %.6f val %.6f lr %g" % row)
    print(json.dumps({"baseline_val": base, "interactive_val": inter, "ratio": inter / base}))
