"""Shared fixtures-in-spirit: synthetic corpora, file writers, and the
independent oracles the tests check production code against."""

from __future__ import annotations

import csv
import math
import os
import statistics
from pathlib import Path

import numpy as np

from slcnn import nn
from slcnn.corpus import RawDocument, preprocess_document
from slcnn.gradcheck import grad_check
from slcnn.model import Model, ModelConfig, build_model

# --------------------------------------------------------------------------
# Golden sentence corpus: the true segmentation is known by construction.
# --------------------------------------------------------------------------

# Every sentence starts with an uppercase letter or digit, ends with a
# terminator, and never ends in a stop-list abbreviation, so joining any
# run of them with single spaces has exactly one valid segmentation.
_GOLDEN_BASE = [
    "Dr. Smith arrived.",
    "He left.",
    "Mr. Brown visited St. Louis last spring.",
    "The U.S. Navy sailed at dawn.",
    "Profits rose 3.5 percent in the quarter.",
    "They finished at No. 5 overall.",
    "Costs doubled, e.g. Fuel and freight.",
    "Margins slipped, i.e. Pricing stayed weak.",
    "Acme Inc. Shares climbed four percent.",
    "Datsun Ltd. Opened a second plant.",
    "Wilson and Co. Hired two hundred workers.",
    "The match was France vs. Germany.",
    "Was it enough?",
    "They won!",
    "Nobody expected rain.",
    "The committee met on Tuesday.",
    "Results were mixed at best.",
    "She asked a hard question.",
    "Engineers shipped the fix overnight.",
    "Turnout reached a record high.",
]


def golden_sentences(n: int = 200) -> list[str]:
    """Deterministic list of n sentences with known boundaries."""
    out = []
    i = 0
    while len(out) < n:
        base = _GOLDEN_BASE[i % len(_GOLDEN_BASE)]
        if i < len(_GOLDEN_BASE):
            out.append(base)
        else:
            out.append(f"Round {i} ended quietly. ".strip())
        i += 1
    return out[:n]


def golden_documents(n_sentences: int = 200) -> list[tuple[str, list[str]]]:
    """(joined_text, expected_sentences) pairs covering all golden sentences."""
    sentences = golden_sentences(n_sentences)
    docs = []
    i = 0
    size = 1
    while i < len(sentences):
        chunk = sentences[i : i + size]
        docs.append((" ".join(chunk), chunk))
        i += size
        size = size % 5 + 1
    return docs


# --------------------------------------------------------------------------
# Synthetic labeled corpora (separable classes, deterministic)
# --------------------------------------------------------------------------

TOPIC_WORDS = {
    0: ["market", "stocks", "shares", "profit", "trading", "bank", "economy", "investors"],
    1: ["match", "season", "coach", "team", "players", "league", "score", "keeper"],
    2: ["software", "computer", "internet", "devices", "chips", "users", "network", "digital"],
    3: ["film", "music", "festival", "artist", "theater", "album", "audience", "stage"],
}
FILLER_WORDS = ["the", "a", "new", "report", "said", "on", "after", "with", "latest", "group"]


def make_synthetic_docs(
    n_per_class: int, num_classes: int = 4, seed: int = 0, html_noise: bool = False
) -> list[RawDocument]:
    rng = np.random.default_rng(seed)
    docs = []
    for c in range(num_classes):
        topic = TOPIC_WORDS[c % len(TOPIC_WORDS)]
        for _ in range(n_per_class):
            n_sent = int(rng.integers(1, 6))
            sentences = []
            for _ in range(n_sent):
                n_words = int(rng.integers(4, 10))
                words = []
                for w in range(n_words):
                    pool = topic if rng.random() < 0.6 else FILLER_WORDS
                    words.append(pool[int(rng.integers(0, len(pool)))])
                sentence = " ".join(words).capitalize() + "."
                sentences.append(sentence)
            title = " ".join(sentences[0].rstrip(".").split()[:4]).capitalize()
            body = " ".join(sentences)
            if html_noise and rng.random() < 0.3:
                body = f"<b>{body}</b> &amp; more"
            docs.append(RawDocument(label=c, fields=[title, body]))
    return docs


def write_dataset_csv(path: Path, docs: list[RawDocument]) -> Path:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, quoting=csv.QUOTE_ALL)
        for doc in docs:
            writer.writerow([doc.label + 1, *doc.fields])
    return path


def write_embeddings_file(
    path: Path, tokens: list[str], dim: int = 100, seed: int = 1, scale: float = 0.4
) -> Path:
    rng = np.random.default_rng(seed)
    with path.open("w", encoding="utf-8") as handle:
        for token in tokens:
            vec = rng.normal(0.0, scale, dim)
            handle.write(token + " " + " ".join(f"{v:.5f}" for v in vec) + "\n")
    return path


def corpus_vocab(docs: list[RawDocument]) -> list[str]:
    seen: dict[str, None] = {}
    for doc in docs:
        for sent in preprocess_document(doc):
            for tok in sent:
                seen.setdefault(tok)
    return list(seen)


# --------------------------------------------------------------------------
# Independent oracles
# --------------------------------------------------------------------------

def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, relu: bool) -> np.ndarray:
    """Six nested loops, float64 accumulation; the convolution oracle."""
    m, n, c_in = x.shape
    k, s, t, _ = w.shape
    om, on = m - s + 1, n - t + 1
    out = np.zeros((om, on, k), dtype=np.float64)
    for q in range(k):
        for i in range(om):
            for j in range(on):
                acc = 0.0
                for a in range(s):
                    for bb in range(t):
                        for ch in range(c_in):
                            acc += float(w[q, a, bb, ch]) * float(x[i + a, j + bb, ch])
                acc += float(b[q])
                out[i, j, q] = max(acc, 0.0) if relu else acc
    return out


def naive_maxpool(x: np.ndarray, axis: str) -> np.ndarray:
    """Brute-force size-2 pooling with floor semantics."""
    m, n, c = x.shape
    if axis == "horizontal":
        out = np.zeros((m, n // 2, c), dtype=x.dtype)
        for i in range(m):
            for j in range(n // 2):
                for ch in range(c):
                    out[i, j, ch] = max(x[i, 2 * j, ch], x[i, 2 * j + 1, ch])
    else:
        out = np.zeros((m // 2, n, c), dtype=x.dtype)
        for i in range(m // 2):
            for j in range(n):
                for ch in range(c):
                    out[i, j, ch] = max(x[2 * i, j, ch], x[2 * i + 1, j, ch])
    return out


def enum_param_count(
    variant: str, fc: int, doc_len: int, num_classes: int,
    sent_len: int = 46, num_filters: int = 128, embed_dim: int = 100,
) -> int:
    """Layer-shape enumeration: walk the architecture's shapes and count
    scalars, independently of the model implementation."""
    total = 0
    width = sent_len
    channels = embed_dim
    while width > 1:
        assert width >= 4, "width recurrence stuck"
        for _ in range(2):  # two 1x2 convs per horizontal block
            total += num_filters * (1 * 2 * channels) + num_filters
            channels = num_filters
            width -= 1
        width //= 2
    assert width == 1
    rows = doc_len
    if variant == "slcnn+v":
        for _ in range(2):  # two 2x1 convs in the vertical block
            total += num_filters * (2 * 1 * channels) + num_filters
        rows = (rows - 2) // 2
    flat = rows * num_filters
    total += fc * flat + fc
    total += fc * fc + fc
    total += num_classes * fc + num_classes
    return total


def corpus_stats_bruteforce(docs: list[RawDocument], sent_len: int) -> dict:
    """Plain-python recomputation of every corpus statistic."""
    per_doc_sentences = [preprocess_document(d) for d in docs]
    counts = [len(s) for s in per_doc_sentences]
    all_lengths = [len(t) for doc in per_doc_sentences for t in doc]
    vocab = {tok for doc in per_doc_sentences for sent in doc for tok in sent}
    mu = statistics.fmean(counts)
    sigma = statistics.pstdev(counts)
    t_d = math.ceil(round(mu + 1.5 * sigma, 9))
    cropped_sent = sum(1 for n in all_lengths if n > sent_len)
    cropped_docs = sum(1 for c in counts if c > t_d)
    docs_with_cropped = sum(
        1 for doc in per_doc_sentences if any(len(t) > sent_len for t in doc)
    )
    return {
        "num_documents": len(docs),
        "num_sentences": sum(counts),
        "pct_cropped_sentences": 100.0 * cropped_sent / max(1, sum(counts)),
        "pct_cropped_documents": 100.0 * cropped_docs / len(docs),
        "pct_docs_with_cropped_sentences": 100.0 * docs_with_cropped / len(docs),
        "max_sentences_per_doc": max(counts),
        "max_words_per_sentence": max(all_lengths) if all_lengths else 0,
        "vocab_size": len(vocab),
        "t_d": max(1, t_d),
    }


# --------------------------------------------------------------------------
# Finite-difference sweeps (shared by the unit and acceptance suites)
# --------------------------------------------------------------------------

F64 = np.float64


def fd_sweep_conv(trials: int = 100, activation: str = "relu") -> dict[str, float]:
    """Randomized conv-backward FD check returning the worst relative error
    of the float32 and float64 analytic gradients against a float64 oracle."""
    worst32 = worst64 = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(1000 + trial)
        while True:
            x = rng.normal(size=(2, 3, 6, 2))
            w = rng.normal(size=(3, 1, 2, 2)) * 0.7
            b = rng.normal(size=3) * 0.3
            u = rng.normal(size=(2, 3, 5, 3))
            z, _ = nn.conv2d_forward(x, nn.ConvFilterBank(w, b), "identity")
            if activation == "identity" or np.abs(z).min() > 5e-3:
                break

        _, cache64 = nn.conv2d_forward(x, nn.ConvFilterBank(w, b), activation)
        gx64, gw64, gb64 = nn.conv2d_backward(nn.ConvFilterBank(w, b), cache64, u)
        x32, w32, b32, u32 = (a.astype(np.float32) for a in (x, w, b, u))
        _, cache32 = nn.conv2d_forward(x32, nn.ConvFilterBank(w32, b32), activation)
        gx32, gw32, gb32 = nn.conv2d_backward(nn.ConvFilterBank(w32, b32), cache32, u32)

        params = {"x": x.copy(), "w": w.copy(), "b": b.copy()}

        def loss():
            y, _ = nn.conv2d_forward(
                params["x"], nn.ConvFilterBank(params["w"], params["b"]), activation
            )
            return float((y * u).sum())

        res64 = grad_check(loss, params, {"x": gx64, "w": gw64, "b": gb64}, epsilon=1e-5)
        res32 = grad_check(
            loss, params,
            {"x": gx32.astype(F64), "w": gw32.astype(F64), "b": gb32.astype(F64)},
            epsilon=1e-3,
        )
        worst64 = max(worst64, res64.max_rel_error)
        worst32 = max(worst32, res32.max_rel_error)
    return {"worst32": worst32, "worst64": worst64}


def fd_sweep_dense(trials: int = 100) -> dict[str, float]:
    worst32 = worst64 = 0.0
    done = 0
    seed = 0
    while done < trials:
        seed += 1
        rng = np.random.default_rng(2000 + seed)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(5, 4)) * 0.7
        b = rng.normal(size=5) * 0.3
        u = rng.normal(size=(3, 5))
        if np.abs(x @ w.T + b).min() < 5e-3:
            continue
        done += 1

        layer64 = nn.DenseLayer(w, b)
        _, cache64 = nn.dense_forward(x, layer64, "relu")
        gx64, gw64, gb64 = nn.dense_backward(layer64, cache64, u)
        layer32 = nn.DenseLayer(w.astype(np.float32), b.astype(np.float32))
        _, cache32 = nn.dense_forward(x.astype(np.float32), layer32, "relu")
        gx32, gw32, gb32 = nn.dense_backward(layer32, cache32, u.astype(np.float32))

        params = {"x": x.copy(), "w": w.copy(), "b": b.copy()}

        def loss():
            y, _ = nn.dense_forward(
                params["x"], nn.DenseLayer(params["w"], params["b"]), "relu"
            )
            return float((y * u).sum())

        res64 = grad_check(loss, params, {"x": gx64, "w": gw64, "b": gb64}, epsilon=1e-5)
        res32 = grad_check(
            loss, params,
            {"x": gx32.astype(F64), "w": gw32.astype(F64), "b": gb32.astype(F64)},
            epsilon=1e-3,
        )
        worst64 = max(worst64, res64.max_rel_error)
        worst32 = max(worst32, res32.max_rel_error)
    return {"worst32": worst32, "worst64": worst64}


def fd_sweep_pool(trials: int = 100) -> dict[str, float]:
    """Pooling FD check away from ties; returns the worst error and how many
    tie-free instances were actually checked."""
    worst = 0.0
    checked = 0
    rng = np.random.default_rng(8)
    for _ in range(trials):
        x = rng.normal(size=(2, 3, 6, 2))
        u = rng.normal(size=(2, 3, 3, 2))
        if np.abs(x[:, :, 0:6:2, :] - x[:, :, 1:6:2, :]).min() < 5e-3:
            continue
        _, cache = nn.maxpool_forward(x, "horizontal")
        gx = nn.maxpool_backward(cache, u)
        params = {"x": x.copy()}

        def loss():
            y, _ = nn.maxpool_forward(params["x"], "horizontal")
            return float((y * u).sum())

        res = grad_check(loss, params, {"x": gx}, epsilon=1e-5)
        worst = max(worst, res.max_rel_error)
        checked += 1
    return {"worst64": worst, "checked": checked}


def fd_sweep_softmax(trials: int = 100) -> float:
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(2, 7))
        logits = rng.normal(size=c) * 2.0
        label = int(rng.integers(0, c))
        _, grad = nn.softmax_cross_entropy(logits, label)
        params = {"logits": logits.copy()}

        def loss():
            value, _ = nn.softmax_cross_entropy(params["logits"], label)
            return value

        res = grad_check(loss, params, {"logits": grad}, epsilon=1e-6)
        worst = max(worst, res.max_rel_error)
    return worst


def network_margins(net: Model, x: np.ndarray) -> float:
    """Smallest ReLU pre-activation magnitude / live pool gap anywhere in a
    forward pass; FD checks are only trusted above a margin."""
    smallest = np.inf
    y = x
    banks = list(net.conv_banks) + list(net.vcb_banks)
    pool_after = {2 * i + 1 for i in range(net.config.num_hcb)}
    if net.vcb_banks:
        pool_after.add(len(banks) - 1)
    for i, bank in enumerate(banks):
        z, _ = nn.conv2d_forward(y, bank, "identity")
        smallest = min(smallest, float(np.abs(z).min()))
        y = np.maximum(z, 0)
        if i in pool_after:
            vertical = bool(net.vcb_banks) and i == len(banks) - 1
            axis = nn.VERTICAL if vertical else nn.HORIZONTAL
            ax = y.ndim - 3 if vertical else y.ndim - 2
            pairs = y.shape[ax] // 2
            sl_a = [slice(None)] * y.ndim
            sl_b = [slice(None)] * y.ndim
            sl_a[ax] = slice(0, 2 * pairs, 2)
            sl_b[ax] = slice(1, 2 * pairs, 2)
            a, b = y[tuple(sl_a)], y[tuple(sl_b)]
            live = np.maximum(a, b) > 0
            if live.any():
                smallest = min(smallest, float(np.abs(a - b)[live].min()))
            y, _ = nn.maxpool_forward(y, axis)
    flat = nn.flatten_rows(y)
    for layer in (net.fc1, net.fc2):
        z, _ = nn.dense_forward(flat, layer, "identity")
        smallest = min(smallest, float(np.abs(z).min()))
        flat = np.maximum(z, 0)
    return smallest


def end_to_end_grad_check(doc_len: int, batch: int = 1) -> float:
    """Max relative FD error over every parameter of a shrunken full network
    (num_filters=4, fc_size=8, 3 classes) in float64, ties excluded."""
    cfg = ModelConfig(
        variant="slcnn", doc_len=doc_len, num_classes=3, fc_size=8, num_filters=4,
        seed=0, dropout_rate=0.0,
    )
    # A parameter step of epsilon shifts any pre-activation by at most
    # ~epsilon * |activation| ~ 1e-4, so a 3e-4 margin keeps every ReLU and
    # pooling decision on its side of the kink during differencing.
    for seed in range(200):
        net64 = build_model(cfg, rng=np.random.default_rng([cfg.seed, seed])).with_dtype(F64)
        rng = np.random.default_rng(500 + seed)
        x = rng.normal(size=(batch, doc_len, 46, 100))
        labels = rng.integers(0, 3, size=batch)
        if network_margins(net64, x) > 3e-4:
            break
    else:
        raise AssertionError("no tie-free instance found")

    logits, caches = net64._forward_with_caches(x, "eval", None)
    _, grad_logits = nn.softmax_cross_entropy(logits, labels)
    grads = net64._backward(caches, grad_logits)
    blocks = net64.param_blocks()
    params = dict(blocks)
    analytic = {name: g for (name, _), g in zip(blocks, grads)}

    def loss():
        value, _ = nn.softmax_cross_entropy(net64.forward(x, "eval"), labels)
        return value

    # The FD oracle's own noise is ~eps64 * |loss| / epsilon ~ 2e-11, so
    # flooring the denominator at 1e-4 stops near-zero-gradient coordinates
    # from measuring pure noise while still flagging any defect >= 1e-4*tol.
    result = grad_check(loss, params, analytic, epsilon=1e-5, denom_floor=1e-4)
    return result.max_rel_error


# --------------------------------------------------------------------------
# Optional real-data discovery
# --------------------------------------------------------------------------

DATASET_DIRS = {
    "ag": "ag_news_csv",
    "dbpedia": "dbpedia_csv",
    "yelp_p": "yelp_review_polarity_csv",
    "yelp_f": "yelp_review_full_csv",
    "amazon_p": "amazon_review_polarity_csv",
    "amazon_f": "amazon_review_full_csv",
}


def data_dir() -> Path | None:
    value = os.environ.get("SLCNN_DATA_DIR")
    if value and Path(value).is_dir():
        return Path(value)
    return None


def dataset_file(name: str, split: str) -> Path | None:
    base = data_dir()
    if base is None:
        return None
    candidate = base / DATASET_DIRS[name] / f"{split}.csv"
    return candidate if candidate.is_file() else None


def glove_file() -> Path | None:
    base = data_dir()
    if base is None:
        return None
    candidate = base / "glove.6B.100d.txt"
    return candidate if candidate.is_file() else None
