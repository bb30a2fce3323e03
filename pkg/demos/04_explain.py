"""Grad-CAM heatmaps for one image, per area and combined.

A briefly trained model is asked where it looked when predicting the image's
class. Maps from several areas are resized to the image, averaged and
renormalised; the result is written as a colour overlay.
"""
import tempfile
from pathlib import Path

from cocoreco.connectome import default_connectome
from cocoreco.data import synth_dataset
from cocoreco.explain import combine_cams, gradcam, render_heatmap
from cocoreco.training import TrainConfig, run_training, thread_limit

data = synth_dataset(0, image_size=32, seed=4, splits={"train": 30, "test": 3})
with thread_limit():
    model = run_training("cocoreco", default_connectome(), data, TrainConfig(image_size=32, epochs=3))["model"]

images, labels = data.subset("test")
image, label = images[0], int(labels[0])
cams = [gradcam(model, image, label, layer) for layer in ("V1", "PFC", "IT")]
for cam in cams:
    r, c = divmod(int(cam.values.argmax()), cam.values.shape[1])
    print(f"{cam.target_layers[0]:4s} peak at row {r}, col {c}")
combined = combine_cams(cams)

out = Path(tempfile.mkdtemp()) / "heatmap.ppm"
render_heatmap(combined, out, overlay=image)
print("wrote", out, out.stat().st_size, "bytes")
