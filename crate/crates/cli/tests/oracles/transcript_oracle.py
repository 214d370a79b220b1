"""Reference BLEU/WER for the checked-in transcript pair.

Independent of the Rust code: plain-Python corpus BLEU (clipped counts,
geometric mean of four orders, brevity penalty, 1/2^q smoothing for orders
with no matches) and word-level Levenshtein WER.
"""
import math
import re
import sys
from collections import Counter
from pathlib import Path

PUNCT = ".,!?;:()\"'"


def tokenize(line):
    return re.findall(r"[^\s" + re.escape(PUNCT) + r"]+|[" + re.escape(PUNCT) + r"]", line)


def ngrams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(hyps, refs):
    match = [0] * 4
    total = [0] * 4
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    for h, ref in zip(hyps, refs):
        for n in range(1, 5):
            hc, rc = ngrams(h, n), ngrams(ref, n)
            match[n - 1] += sum(min(v, rc[g]) for g, v in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    logs, q = [], 0
    for m, t in zip(match, total):
        if m == 0:
            q += 1
            logs.append(math.log(1 / (2 ** q * max(t, 1))))
        else:
            logs.append(math.log(m / t))
    if c == 0:
        return 0.0
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100 * bp * math.exp(sum(logs) / 4)


def lev(a, b):
    d = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        prev, d[0] = d[0], i
        for j, y in enumerate(b, 1):
            prev, d[j] = d[j], min(d[j] + 1, d[j - 1] + 1, prev + (x != y))
    return d[len(b)]


def main(hyp_path, ref_path):
    hyps = [tokenize(l) for l in Path(hyp_path).read_text().splitlines()]
    refs = [tokenize(l) for l in Path(ref_path).read_text().splitlines()]
    wer = 100 * sum(lev(h, r) for h, r in zip(hyps, refs)) / sum(len(r) for r in refs)
    print(f"bleu {bleu(hyps, refs)!r}")
    print(f"wer {wer!r}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
