"""What the fusion learner decides, element by element.

Every element of the advanced tier gets its own weight in [0, 1]. At 1 the
client takes the global value; at 0 it keeps its own. Weights start at 1
and are trained on the client's own loss before each synchronization. This
script trains briefly and then prints how far each client moved away from
full overwrite. Expect small moves: clients mostly keep taking the global
advanced tier, nudging a minority of elements toward their own values.
"""

import numpy as np

from brainfed import generate, reference_config, reference_spec, run_training

corpus = generate(reference_spec())
cfg = reference_config(epochs=40, eval_every=40, dfl_eta=0.5)
report = run_training(corpus, cfg)

for client in report.clients:
    for modality, model in client.models.items():
        for layer in model.fusion.layers:
            w = layer.weight.ravel()
            print(
                f"subject {client.subject_id} {modality:5s} {layer.name:7s} "
                f"mean w {w.mean():.3f}  share at 1: {np.mean(w == 1.0):.2f}  share below 0.5: {np.mean(w < 0.5):.2f}"
            )
