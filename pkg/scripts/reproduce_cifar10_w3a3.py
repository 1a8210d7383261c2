"""Full-scale W3A3 run with an externally supplied CIFAR-10 teacher.

Not part of CI: it needs a pretrained network and the CIFAR-10 test batch,
and takes hours on CPU. Example::

    python scripts/reproduce_cifar10_w3a3.py \
        --teacher mypkg.resnet:resnet20 --weights resnet20.pt \
        --probes layer1,layer2,layer3 --cifar cifar-10-batches-py --out runs/cifar10

The teacher factory is called with no arguments and must return an eager
``nn.Module`` that takes normalized 3x32x32 inputs. Probe names are module
names whose outputs are aligned during fine-tuning.
"""

import argparse
import importlib
import json
import logging
import pickle
from pathlib import Path

import numpy as np
import torch

from zsq_forge.finetune import FinetuneConfig, evaluate, finetune, make_student
from zsq_forge.storage import save_checkpoint, save_synthetic
from zsq_forge.synthesis import SynthesisConfig, synthesize_dataset

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
TARGET, WINDOW = 88.34, 2.0


def load_teacher(spec: str, weights: str, probes: list[str]) -> torch.nn.Module:
    module, _, factory = spec.partition(":")
    model = getattr(importlib.import_module(module), factory)()
    model.load_state_dict(torch.load(weights, map_location="cpu"))
    model.probe_names = probes
    return model.eval()


def load_cifar_test(root: Path) -> tuple[torch.Tensor, torch.Tensor]:
    with open(root / "test_batch", "rb") as fh:
        batch = pickle.load(fh, encoding="latin1")
    x = torch.from_numpy(np.asarray(batch["data"], dtype=np.float32).reshape(-1, 3, 32, 32) / 255.0)
    mean = torch.tensor(CIFAR_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(CIFAR_STD).view(1, 3, 1, 1)
    return (x - mean) / std, torch.tensor(batch["labels"])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--teacher", required=True, help="module:factory returning the network")
    parser.add_argument("--weights", required=True, help="state_dict file for the teacher")
    parser.add_argument("--probes", required=True, help="comma-separated probe module names")
    parser.add_argument("--cifar", required=True, type=Path, help="directory holding cifar-10 test_batch")
    parser.add_argument("--out", type=Path, default=Path("runs/cifar10_w3a3"))
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")

    teacher = load_teacher(args.teacher, args.weights, args.probes.split(","))
    for p in teacher.parameters():
        p.requires_grad_(False)
    x_test, y_test = load_cifar_test(args.cifar)
    mean = torch.tensor(CIFAR_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(CIFAR_STD).view(1, 3, 1, 1)
    bounds = ((0 - mean) / std, (1 - mean) / std)

    syn = synthesize_dataset(teacher, SynthesisConfig(seed=args.seed), bounds)
    save_synthetic(syn, args.out / "synthetic")
    student = make_student(teacher, syn.images, 3, 3)
    state = finetune(syn.images, syn.labels, teacher, student, FinetuneConfig(seed=args.seed),
                     test=(x_test, y_test))
    save_checkpoint(student, args.out / "student.ckpt")
    top1 = 100 * evaluate(student, x_test, y_test)
    result = {"teacher_top1": 100 * evaluate(teacher, x_test, y_test), "student_top1": top1,
              "best_top1": 100 * state.best_top1, "target": TARGET,
              "within_window": abs(top1 - TARGET) <= WINDOW}
    (args.out / "result.json").write_text(json.dumps(result, indent=2))
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
