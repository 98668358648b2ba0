"""
Training end to end, through the command line
=============================================

A short run on a small TriScenes set using the `atvnet` CLI: generate data,
train, evaluate, segment one image and look at the gate weights per scene
regime. The full desk recipe (200/50 scenes, 30 epochs) is what the
acceptance suite runs; this uses 40/10 scenes and 20 epochs (a few seconds).
"""
import tempfile
from pathlib import Path

from atvnet.cli import main

work = Path(tempfile.mkdtemp(prefix="atvnet-demo-"))
data, ckpt = work / "data", work / "model.atvs"

main(["gen-data", "--out", str(data), "--num", "40", "--num-val", "10"])
main(["train", "--data", str(data), "--out", str(ckpt), "--epochs", "20"])
main(["eval", "--data", str(data), "--ckpt", str(ckpt)])
main(["infer", "--ckpt", str(ckpt), "--image", str(data / "val" / "images" / "0000.ppm"),
      "--out", str(work / "mask.pgm")])
main(["inspect-gate", "--ckpt", str(ckpt), "--data", str(data)])

# errors are one line on stderr with exit code 2
print("exit code for --size 30:", main(["gen-data", "--out", str(work / "bad"), "--size", "30"]))
print("outputs in", work)
