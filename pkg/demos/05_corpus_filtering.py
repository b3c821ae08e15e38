"""
Preparing a translated reasoning corpus
=======================================

Drop samples that ask for a specific output language, cut a long trace into
budgeted chunks for translation, then screen translated pairs for empty,
degenerate or oversized outputs.
"""

import dataclasses

from layerswap.corpus import CharTokenEstimator, Sample, anomaly_filters, chunk_text, self_reference_filter
from layerswap.lid import bundled_corpus

samples = [
    Sample("a", "What is 12 * 7?", "Ten sevens are 70, two more are 14.", "84"),
    Sample("b", "Explain why the sky is blue. Answer in French.", "", ""),
    Sample("c", "Translate the following into German: good night.", "", ""),
]
for s in samples:
    print(s.id, "drop" if self_reference_filter(s) else "keep", "|", s.question)

# chunking keeps every character; budget is in estimated tokens (4 chars each)
trace = "First we add.\n\nThen we divide by three. The remainder is one! So the answer is 5."
for i, chunk in enumerate(chunk_text(trace, budget_tokens=8)):
    print(f"chunk {i}: {chunk!r}")

# a paired corpus from the parallel sample sentences, with one degenerate output
en, fr = bundled_corpus()["en"], bundled_corpus()["fr"]
pairs = []
for i in range(40):
    body = slice(3 * i, 3 * i + 3)
    pairs.append((Sample(f"s{i:02d}", en[i], " ".join(en[body]), en[i + 1]), Sample(f"s{i:02d}", fr[i], " ".join(fr[body]), fr[i + 1])))
src, tr = pairs[7]
pairs[7] = (src, dataclasses.replace(tr, reasoning=" ".join([tr.reasoning] * 6)))
pairs[12] = (pairs[12][0], Sample("s12"))

for v in anomaly_filters(pairs, k_sigma=3.0, max_tokens=32768, estimator=CharTokenEstimator(4)):
    if not v.kept:
        zc, zl = v.stats["z_compression"], v.stats["z_length"]
        print(v.id, v.reasons, "z:", None if zc is None else round(zc, 2), None if zl is None else round(zl, 2))
