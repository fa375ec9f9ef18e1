from .layers import (BatchNorm, Conv2d, Dropout, Flatten, Layer, Linear,
                     MaxPool2d, Param, PReLU, Sequential, Sigmoid)
from .losses import bce_grad, bce_loss, contrastive_grad, contrastive_loss
from .models import (EMBEDDING_DIM, INPUT_SHAPE, Scorer, build_model,
                     build_skeleton, cnn_score, loop_input, mix_clips,
                     pair_input, snn_distance, snn_embed, standardize)
from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .train import FeatureStore, TrainConfig, choose_distance_threshold, train
