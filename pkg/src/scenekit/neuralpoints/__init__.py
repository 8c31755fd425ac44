"""Multi-resolution neural points with a colour decoder, trained online."""

from .io import (Snapshot, SnapshotPublisher, freeze, load_checkpoint, render_view,
                 save_checkpoint)
from .mlp import Mlp
from .points import (NeuralPointLevel, NeuralPointSet, allocate, encode, encode_batch,
                     interpolation_weights, predict_color, predict_colors, voxel_representatives)
from .train import (Adam, TrainerState, TrainFrameQueue, frame_points, learning_rate,
                    loss_and_grads, parameters, train_on_frames, train_step)

__all__ = [
    "Adam", "Mlp", "NeuralPointLevel", "NeuralPointSet", "Snapshot", "SnapshotPublisher",
    "TrainFrameQueue", "TrainerState", "allocate", "encode", "encode_batch", "frame_points", "freeze",
    "interpolation_weights", "learning_rate", "load_checkpoint", "loss_and_grads", "parameters",
    "predict_color", "predict_colors", "render_view", "save_checkpoint", "train_on_frames",
    "train_step",
    "voxel_representatives",
]
