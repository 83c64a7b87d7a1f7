"""Financial news sentiment classification at desk scale.

Three ways to classify a financial news title as positive / negative /
neutral with a small decoder-only transformer:

- few-shot prompting of an (untrained or trained) language model,
- supervised fine-tuning on packed single-choice prompts with a
  block-diagonal attention mask and answer-only loss,
- a direct 3-way classification head.
"""

from finsent.dataset import LabeledExample, SplitSpec, load_phrasebank, split
from finsent.estimator import FinSentClassifier
from finsent.model import ModelConfig
from finsent.prompting import PromptTemplate
from finsent.tokenizer import Vocabulary, train_bpe
from finsent.training import TrainConfig

__all__ = [
    "FinSentClassifier",
    "LabeledExample",
    "ModelConfig",
    "PromptTemplate",
    "SplitSpec",
    "TrainConfig",
    "Vocabulary",
    "load_phrasebank",
    "split",
    "train_bpe",
]

__version__ = "0.1.0"
