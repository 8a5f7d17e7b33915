"""
What do isolated and fused features know?
=========================================

Label information (H(y) minus the best cross-entropy of a linear head),
an input-information proxy (negated reconstruction error of a mirrored
decoder) and linear separability, all at the deepest stage.
"""
import numpy as np

from fusefl.data import SemConfig, synth_sem
from fusefl.federation import FedConfig, run_ensemble, run_fusefl
from fusefl.model import mlp_template
from fusefl.probes import ProbeConfig, run_probes

clients, test = synth_sem(SemConfig(alpha=0.5, samples_per_client=600), seed=0)
template = mlp_template(clients[0].inputs.shape[1:], 10, 64, depth=4, num_blocks=2)

_, fused = run_fusefl(FedConfig(template=template, epochs=20), clients, test)
_, ensemble = run_ensemble(FedConfig(algorithm="ensemble", template=template, epochs=20), clients, test)

train, held_out = test.subset(np.arange(1000)), test.subset(np.arange(1000, 2000))
for name, model in (("fused", fused), ("isolated (member mean)", ensemble)):
    res = run_probes(model, train, held_out, ProbeConfig())
    print(name, f"H(y)={res.label_entropy:.3f}")
    for r in res.records:
        print(f"  stage {r['stage']}: mi_y {r['mi_y']:.3f}  mi_x proxy {r['mi_x_proxy']:.3f}  "
              f"separability {r['separability']:.3f}")
