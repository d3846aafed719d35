"""Searching the message log for planted training values.

The generator writes 16 canary values into random training inputs. Each has
a distinctive f64 bit pattern. An honest run only ever sends parameter
tensors and sample counts, so none of those bytes can appear in the log. A
deliberately leaky client that attaches one raw input row is caught at once.
"""

from brainfed import generate, reference_config, reference_spec, run_training
from brainfed.audit import audit_log, corpus_canaries, make_leaky_round

corpus = generate(reference_spec())
canaries = corpus_canaries(corpus)
cfg = reference_config(epochs=5)

honest = run_training(corpus, cfg)
print("honest run")
print("\n".join("  " + line for line in audit_log(honest.log.getvalue(), canaries).lines()))

leaky = run_training(corpus, cfg, round_fn=make_leaky_round(corpus))
report = audit_log(leaky.log.getvalue(), canaries)
print("leaky run")
print("\n".join("  " + line for line in report.lines()[:6]))
print(f"  ... {len(report.matches)} matches in total -> {'PASS' if report.passed else 'FAIL'}")
