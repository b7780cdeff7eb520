"""Build the toy CLIP-layout tokenizer files and golden token ids.

Takes the first 2048 merges of the public CLIP BPE merge list so that every
token id below 2560 coincides with the full CLIP vocabulary. The golden ids
are produced by a direct transcription of the reference Python tokenizer
(byte-to-unicode table, regex pre-split, greedy lowest-rank merging).

usage: python3 gen_toy_tokenizer.py bpe_simple_vocab_16e6.txt.gz OUT_DIR
"""
import gzip
import json
import sys

import regex as re

N_MERGES = 2048


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(2 ** 8):
        if b not in bs:
            bs.append(b)
            cs.append(2 ** 8 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


def get_pairs(word):
    return {(word[i], word[i + 1]) for i in range(len(word) - 1)}


def main():
    src, out = sys.argv[1], sys.argv[2]
    merges = gzip.open(src).read().decode("utf-8").split("\n")[1:1 + N_MERGES]
    merges = [tuple(m.split()) for m in merges]
    vocab = list(bytes_to_unicode().values())
    vocab = vocab + [v + "</w>" for v in vocab]
    vocab += ["".join(m) for m in merges]
    vocab += ["<start_of_text>", "<end_of_text>"]
    encoder = {v: i for i, v in enumerate(vocab)}
    ranks = {m: i for i, m in enumerate(merges)}
    byte_encoder = bytes_to_unicode()

    with open(f"{out}/toy_vocab.txt", "w", encoding="utf-8") as f:
        for tok, i in encoder.items():
            f.write(f"{tok} {i}\n")
    with open(f"{out}/toy_merges.txt", "w", encoding="utf-8") as f:
        for a, b in merges:
            f.write(f"{a} {b}\n")

    def bpe(token):
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = get_pairs(word)
        if not pairs:
            return [token + "</w>"]
        while True:
            bigram = min(pairs, key=lambda p: ranks.get(p, float("inf")))
            if bigram not in ranks:
                break
            first, second = bigram
            new_word, i = [], 0
            while i < len(word):
                try:
                    j = word.index(first, i)
                    new_word.extend(word[i:j])
                    i = j
                except ValueError:
                    new_word.extend(word[i:])
                    break
                if word[i] == first and i < len(word) - 1 and word[i + 1] == second:
                    new_word.append(first + second)
                    i += 2
                else:
                    new_word.append(word[i])
                    i += 1
            word = tuple(new_word)
            if len(word) == 1:
                break
            pairs = get_pairs(word)
        return list(word)

    pat = re.compile(r"""<start_of_text>|<end_of_text>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""", re.IGNORECASE)

    def encode(text):
        text = " ".join(text.split()).strip().lower()
        ids = []
        for token in re.findall(pat, text):
            token = "".join(byte_encoder[b] for b in token.encode("utf-8"))
            ids.extend(encoder[t] for t in bpe(token))
        return ids

    texts = [
        "a photo of a cat",
        "A Photo  of the   CAT.",
        "a industrial photo of a perfect bottle",
        "a cropped textual photo of the imperfect pcb board.",
        "a photo of a wood with a hole, 3 defects!",
        "naïve café zürich",
        "it's what we'll see",
        "",
    ]
    golden = [{"text": t, "ids": encode(t)} for t in texts]
    with open(f"{out}/tokenizer_golden.json", "w", encoding="utf-8") as f:
        json.dump({"sot": encoder["<start_of_text>"], "eot": encoder["<end_of_text>"], "cases": golden}, f, ensure_ascii=False, indent=1)


if __name__ == "__main__":
    main()
