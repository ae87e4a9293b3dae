"""Scalar recurrence w <- w - lr*(lambda*w) for the quadratic bowl, with the
window rule agent acting on the logged losses every CADENCE steps."""
import json

LAM = 500.0
LR0 = 5e-3
STEPS = 200
CADENCE = 10
W = 5


def rule(losses):
    if len(losses) < 2:
        return "keep"
    w = losses[-W:]
    d = [b - a for a, b in zip(w, w[1:])]
    if w[-1] > w[0]:
        return "halve"
    changes = sum(1 for a, b in zip(d, d[1:]) if (a > 0 and b < 0) or (a < 0 and b > 0))
    mean_abs = sum(abs(x) for x in d) / len(d)
    mean = sum(w) / len(w)
    if changes >= 2 and mean_abs > 0.10 * mean:
        return "halve"
    if all(x < 0 for x in d) and w[0] > 0 and (w[0] - w[-1]) / w[0] < 0.01:
        return "double"
    return "keep"


def run(agent):
    w, lr = 1.0, LR0
    losses, lrs, decisions = [], [], []
    initial = 0.5 * LAM * w * w
    for step in range(1, STEPS + 1):
        loss = 0.5 * LAM * w * w
        w = w - lr * (LAM * w)
        losses.append(loss)
        lrs.append(lr)
        if agent and step % CADENCE == 0:
            a = rule(losses)
            decisions.append((step, a))
            lr = lr * {"double": 2.0, "halve": 0.5, "keep": 1.0}[a]
    final = 0.5 * LAM * w * w
    return initial, final, lr, lrs, decisions


if __name__ == "__main__":
    i, f, lr, _, _ = run(False)
    print(json.dumps({"static_initial": i, "static_final": f, "static_final_hex": f.hex()}))
    i, f, lr, lrs, dec = run(True)
    changes = [d for d in dec if d[1] != "keep"]
    first_stable = next(s for s, l in enumerate(lrs, 1) if l < 4e-3)
    print(json.dumps({"agent_final": f, "agent_final_hex": f.hex(), "final_lr": lr,
                      "first_step_below_threshold": first_stable, "changes": changes}))
