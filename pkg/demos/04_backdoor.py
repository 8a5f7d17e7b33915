"""
A backdoored client
===================

Client 0's images get a label-specific patch in the corner. Its local model
learns the shortcut: near perfect on its own data, poor on clean test data.
"""
from fusefl.data import BackdoorConfig, SemConfig, synth_sem
from fusefl.federation import FedConfig, run_ensemble, run_fusefl
from fusefl.model import mlp_template

sem = SemConfig(alpha=0.5, inv_dim=200, spu_dim=56, image_side=16, samples_per_client=600,
                inv_scale=0.25, spurious_strength=0.5)
clients, test = synth_sem(sem, seed=0)
template = mlp_template(sem.input_shape, 10, 64, depth=4, num_blocks=2)
bd = BackdoorConfig(target_clients=(0,), patch_side=10)

iso, _ = run_ensemble(FedConfig(algorithm="ensemble", template=template, epochs=20, backdoor=bd), clients, test)
for row in iso.client_accuracy:
    print(f"client {row['client']}: local {row['local_acc']:.3f}  clean global {row['global_acc']:.3f}")
print("ensemble clean accuracy", round(iso.test_accuracy, 3))

fused, _ = run_fusefl(FedConfig(template=template, epochs=20, backdoor=bd), clients, test)
print("fusefl clean accuracy", round(fused.test_accuracy, 3))
