"""Writes golden_logits.json: last-position logits of the toy archive for a
fixed sequence, computed by a straight numpy float32 implementation that
parses the archive itself. Run from this directory."""
import json
import struct

import numpy as np

with open("toy_model.dtw", "rb") as f:
    raw = f.read()
assert raw[:4] == b"DTW1"
(hlen,) = struct.unpack("<I", raw[4:8])
header = json.loads(raw[8 : 8 + hlen])
data = raw[8 + hlen :]
cfg = header["config"]
W = {}
for t in header["tensors"]:
    buf = data[t["offset"] : t["offset"] + t["length"]]
    W[t["name"]] = np.frombuffer(buf, dtype="<f4").reshape(t["shape"]).astype(np.float32)

f32 = np.float32


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True, dtype=f32)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True, dtype=f32)
    return (x - mu) / np.sqrt(var + f32(1e-5)) * g + b


def gelu(x):
    c = f32(np.sqrt(2.0 / np.pi))
    return f32(0.5) * x * (f32(1) + np.tanh(c * (x + f32(0.044715) * x**3)))


tokens = [1, 10, 18, 22, 5, 26]
ages = [0.0, 42.0, 47.5, 53.25, 60.0, 61.125]
E, H = cfg["n_embd"], cfg["n_head"]
hd = E // H
age_in = np.array([a / cfg["age_scale"] for a in ages]).astype(f32)[:, None]
h = W["tok_emb.weight"][tokens] + age_in * W["age_emb.weight"][None, :]
L = len(tokens)
mask = np.triu(np.ones((L, L), dtype=bool), k=1)
for i in range(cfg["n_layer"]):
    p = lambda s: W[f"blk.{i}.{s}"]
    x = layer_norm(h, p("ln1.gain"), p("ln1.bias"))
    q, k, v = x @ p("attn.wq").T, x @ p("attn.wk").T, x @ p("attn.wv").T
    out = np.zeros_like(h)
    for head in range(H):
        s = slice(head * hd, (head + 1) * hd)
        sc = (q[:, s] @ k[:, s].T) / f32(np.sqrt(hd))
        sc[mask] = -np.inf
        sc = np.exp(sc - sc.max(axis=1, keepdims=True))
        sc = sc / sc.sum(axis=1, keepdims=True)
        out[:, s] = sc @ v[:, s]
    h = h + out @ p("attn.wo").T
    x = layer_norm(h, p("ln2.gain"), p("ln2.bias"))
    h = h + gelu(x @ p("mlp.w1").T + p("mlp.b1")) @ p("mlp.w2").T + p("mlp.b2")
logits = layer_norm(h, W["ln_f.gain"], W["ln_f.bias"]) @ W["head.weight"].T

with open("golden_logits.json", "w") as f:
    json.dump(
        {
            "token_ids": tokens,
            "ages": ages,
            "last_logits": [float(v) for v in logits[-1]],
            "all_logits": [[float(v) for v in row] for row in logits],
        },
        f,
        indent=1,
    )
print(logits[-1][:5])
