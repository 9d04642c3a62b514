"""Single-lead to multi-lead ECG representation alignment."""
from .align_loss import LossConfig, SigmoidAlignLoss, siglip_grad, siglip_loss
from .ecg_store import (CANONICAL_LEADS, Dataset, ECGRecord, SynthSpec, canonicalize_leads, ingest,
                        read_record, resample, sanitize, synthesize, write_record, zscore)
from .encoder import (EmbeddingBatch, EncoderConfig, ResNet1D, forward, forward_stopgrad,
                      init_params, load_params, save_params)
from .evaluation import (ProbeConfig, ProbeReport, RetrievalReport, latent_gap_fid, linear_probe,
                         macro_auc, retrieval_eval)
from .pairs import PairBatch, SMPair, collate, self_cut, zero_mask
from .pretrain import PretrainConfig, TrainState, fit, train_step

__version__ = "0.1.0"
