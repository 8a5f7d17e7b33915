"""
Checkpoints and the command line
================================

Models serialise to one file: magic, a JSON manifest, then a float32 blob
whose SHA-256 is checked on load. The `fusefl` command wraps the library.
"""
import json
import tempfile
from pathlib import Path

from fusefl.checkpoint import checkpoint_load, checkpoint_save
from fusefl.cli import main
from fusefl.data import SemConfig, synth_sem
from fusefl.federation import FedConfig, run_fusefl
from fusefl.model import mlp_template

work = Path(tempfile.mkdtemp())
clients, test = synth_sem(SemConfig(num_clients=3, samples_per_client=200), seed=0)
template = mlp_template(clients[0].inputs.shape[1:], 10, 16, depth=2, num_blocks=2)
_, fused = run_fusefl(FedConfig(num_clients=3, epochs=4, template=template), clients, test)
nbytes = checkpoint_save(fused, work / "fused.ckpt")
back = checkpoint_load(work / "fused.ckpt")
print("checkpoint", nbytes, "bytes; stages", back.num_stages, "client order", back.stages[0].client_order)

# the same thing through the CLI: run, probe, report
(work / "demo.cfg").write_text("""
run.name = demo
fed.num_clients = 3
fed.epochs = 4
model.width = 16
model.depth = 2
sem.samples_per_client = 200
""")
main(["run", str(work / "demo.cfg"), "--out", str(work / "demo")])
main(["probe", str(work / "demo" / "model.ckpt"), "--config", str(work / "demo.cfg"),
      "--out", str(work / "demo" / "probes.csv")])
main(["report", str(work / "demo")])
summary = json.loads((work / "demo" / "summary.json").read_text())
print("summary keys:", sorted(summary))
