"""Contrastive learning of musical representations from raw waveforms, in numpy."""

from .audio_io import AudioBuffer, decode_wav, encode_wav, resample
from .augment import TransformChain, TransformConfig, apply_chain, make_pair
from .config import RunConfig, load_config
from .contrastive import TrainConfig, nt_xent, pretrain
from .datasets import load_manifest, synthesize_corpus
from .evaluation import EvalReport, ProbeConfig, evaluate, pr_auc, roc_auc
from .model import EncoderConfig, ModelParams, encode, load_checkpoint, project, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "decode_wav", "encode_wav", "resample",
    "TransformChain", "TransformConfig", "apply_chain", "make_pair",
    "RunConfig", "load_config",
    "TrainConfig", "nt_xent", "pretrain",
    "load_manifest", "synthesize_corpus",
    "EvalReport", "ProbeConfig", "evaluate", "pr_auc", "roc_auc",
    "EncoderConfig", "ModelParams", "encode", "load_checkpoint", "project", "save_checkpoint",
]
