"""Train a small model on synthetic shapes, then reload it from disk.

The synthetic set draws one bright square, disk or cross over noise. A few
epochs at 32x32 are enough to see the loss fall; the full desk-scale setting
(64x64, 20 epochs) is exercised by the acceptance suite.
"""
import tempfile
from pathlib import Path

from cocoreco.connectome import default_connectome
from cocoreco.data import synth_dataset
from cocoreco.training import TrainConfig, evaluate, load_checkpoint, run_training, thread_limit

data = synth_dataset(0, image_size=32, seed=3, splits={"train": 30, "val": 10, "test": 10})
cfg = TrainConfig(image_size=32, epochs=4, seed=0)

with thread_limit(), tempfile.TemporaryDirectory() as tmp:
    results = run_training("cocoreco", default_connectome(), data, cfg, out_dir=tmp)
    for epoch, loss in enumerate(results["history"], 1):
        print(f"epoch {epoch}: mean loss {loss:.4f}")
    print("test:", results["test"])
    model = load_checkpoint(Path(tmp) / "checkpoint")
    print("reloaded test accuracy:", evaluate(model, data, "test").accuracy)
    print("reproducibility:", results["reproducibility"])
