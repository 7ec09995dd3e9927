"""

Copyright (c) 2023-2024 Daxzio

Permission is hereby granted, free of charge, to any person obtaining a copy
of this software and associated documentation files (the "Software"), to deal
in the Software without restriction, including without limitation the rights
to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
copies of the Software, and to permit persons to whom the Software is
furnished to do so, subject to the following conditions:

The above copyright notice and this permission notice shall be included in
all copies or substantial portions of the Software.

THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY
FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN
THE SOFTWARE.

"""

from .version import __version__

from .boxops import Box
from .boxops import Detection
from .boxops import AnchorSet
from .boxops import MatchResult
from .boxops import iou
from .boxops import nms
from .boxops import generate_anchors
from .boxops import match_anchors
from .boxops import encode_offsets
from .boxops import decode_box
from .detector import DetectorConfig
from .detector import TinyDetector
from .detector import DomainClassifier
from .detector import grad_reverse
from .detector import predict
from .detector import save_checkpoint
from .detector import load_checkpoint
from .losses import BsrConfig
from .losses import task_loss
from .losses import self_training_loss
from .losses import wst_loss
from .losses import weak_negative_mining
from .losses import bsr_loss
from .losses import adversarial_loss
from .losses import adversarial_objectives
from .pseudolabel import SrrsPolicy
from .pseudolabel import PseudoLabel
from .pseudolabel import srrs
from .pseudolabel import generate_pseudo_labels
from .pseudolabel import epsilon_schedule
from .data import DomainShiftConfig
from .data import DomainStyle
from .data import DomainBatch
from .data import generate_domain_pair
from .data import load_labeled_split
from .data import load_unlabeled_split
from .data import compose_batch
from .config import TrainConfig
from .runlog import RunLog
from .evalreport import EvalResult
from .evalreport import evaluate_map
from .evalreport import plot_trends
from .trainloop import train
from .trainloop import ablation_suite
from .trainloop import sweep
