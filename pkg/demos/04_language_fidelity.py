"""
Language fidelity of reasoning traces
=====================================

Train character n-gram profiles on the bundled six-language sample corpus,
classify a few sentences, and measure the fraction of "traces" that stay in
the target language when some of them drift into English.
"""

from layerswap.lid import bundled_corpus, classify, fidelity, train_profiles

corpus = bundled_corpus()
train = {lang: sents[20:] for lang, sents in corpus.items()}
profiles = train_profiles(train, k=300)

for text in ["Il faut d'abord calculer la somme des deux nombres.", "Wir teilen beide Seiten durch vier.", "所以答案是十二。", "Kwa hiyo jibu ni kumi na mbili."]:
    label, dist = classify(text, profiles)
    runner_up = sorted(dist.items(), key=lambda kv: kv[1])[1]
    print(f"{label}  {text[:45]:45s} (next: {runner_up[0]} at +{runner_up[1] - dist[label]})")

# traces: pairs of held-out sentences, three out of ten switched to English
fr, en = corpus["fr"][:20], corpus["en"][:20]
traces = [fr[i] + " " + fr[i + 1] for i in range(0, 14, 2)] + [en[i] + " " + en[i + 1] for i in range(0, 6, 2)]
report = fidelity(traces, "fr", profiles)
print(report.to_dict())
