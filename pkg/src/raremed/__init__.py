"""RAREMed: pretrain-finetune transformer medication recommendation with group-fairness evaluation."""

from .ehr_data import CodeVocabulary, DataError, DdiGraph, EhrDataset, PatientRecord, load_dataset, load_ddi_graph, split_dataset
from .encoder import EncoderConfig, PatientEncoder, build_input_sequence, collate
from .finetune import LossWeights, RecommendationModel, combined_loss, finetune, predict_probs, recommend
from .metrics import EvalReport, ddi_rate, evaluate, jaccard, prauc, precision_recall_f1
from .pretrain import pretrain
from .synth_cohort import SynthConfig, generate_cohort
from .training import Schedule

__version__ = "0.1.0"
