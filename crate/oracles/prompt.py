"""Golden prompt: renders a recorded observation with the shipped template.

Floats use shortest round-trip digits, in plain decimal for magnitudes in
[1e-4, 1e16) and scientific notation ("1.5e-7") otherwise.
"""
import json
import pathlib

from quadratic import LAM

ROOT = pathlib.Path(__file__).resolve().parent.parent
TEMPLATE = ROOT / "crates/core/assets/lr_prompt.txt"
OUT = ROOT / "crates/core/tests/golden"


def fmt(x):
    if x == 0.0:
        return "-0.0" if str(x).startswith("-") else "0.0"
    r = repr(x)
    mant, _, exp = r.partition("e")
    digits = mant.replace("-", "").replace(".", "").lstrip("0")
    # Recover the decimal exponent of the leading digit.
    e10 = int(exp) if exp else None
    a = abs(x)
    if 1e-4 <= a < 1e16:
        if e10 is None:
            return r if "." in r else r + ".0"
        s = format(x, ".%df" % max(0, len(digits) - 1 - e10))
        return s if "." in s else s + ".0"
    if e10 is None:
        e10 = len(str(int(a))) - 1 if a >= 1 else None
        if e10 is None:
            raise ValueError(x)
    digits = digits.rstrip("0") or "0"
    m = digits[0] + ("." + digits[1:] if len(digits) > 1 else "")
    return ("-" if x < 0 else "") + m + "e" + str(e10)


def pairs(ps):
    return "[" + ", ".join("(%d, %s)" % (s, fmt(v)) for s, v in ps) + "]"


def observation():
    w, lr = 1.0, 5e-3
    lrs, train = [], []
    for step in range(1, 11):
        train.append((step, 0.5 * LAM * w * w))
        lrs.append((step, lr))
        w = w - lr * (LAM * w)
    valid = [(5, 0.5 * LAM * 1.5 ** 8), (10, 0.5 * LAM * 1.5 ** 20)]
    return {"current_step": 10, "current_lr": lr, "lr_history": lrs,
            "train_loss_history": train, "valid_loss_history": valid}


if __name__ == "__main__":
    obs = observation()
    text = TEMPLATE.read_text()
    text = (text.replace("{{current_step}}", str(obs["current_step"]))
                .replace("{{current_lr}}", fmt(obs["current_lr"]))
                .replace("{{lr_history}}", pairs(obs["lr_history"]))
                .replace("{{train_loss_history}}", pairs(obs["train_loss_history"]))
                .replace("{{valid_loss_history}}", pairs(obs["valid_loss_history"])))
    (OUT / "observation.json").write_text(json.dumps(obs) + "\n")
    (OUT / "prompt.txt").write_text(text)
    print(text)
