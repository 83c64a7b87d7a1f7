import numpy as np
import pytest

from finsent.dataset import LabeledExample
from finsent.prompting import PromptTemplate
from finsent.tokenizer import train_bpe

# short template keeps toy prompts a dozen tokens long, so training tests
# stay fast; structure matches the default template exactly
TOY_TEMPLATE = PromptTemplate(
    instruction="Sentiment?",
    exemplars=(("up", "A"), ("down", "B"), ("flat", "C")),
    question_format="T: {{title}}\nAnswer:",
)

KEYWORD = {"positive": "gains", "negative": "losses", "neutral": "steady"}
LABEL_CYCLE = ("positive", "negative", "neutral")
COMPANIES = (
    "Acme", "Borg", "Ceres", "Dyno", "Elix", "Fondo", "Gyro", "Hexa",
    "Ivex", "Juno", "Kolo", "Lumen", "Mistra", "Nordix", "Orba", "Pyra",
)


def toy_corpus(n: int, seed: int = 1) -> list[LabeledExample]:
    """Balanced synthetic titles whose keyword determines the label."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = LABEL_CYCLE[i % 3]
        company = COMPANIES[int(rng.integers(len(COMPANIES)))]
        quarter = int(rng.integers(1, 9))
        out.append(
            LabeledExample(f"{company} reports {KEYWORD[label]} in Q{quarter}", label)
        )
    return out


@pytest.fixture(scope="session")
def toy_template():
    return TOY_TEMPLATE


@pytest.fixture(scope="session")
def toy_vocab():
    corpus = [TOY_TEMPLATE.build_sft_prompt(e.sentence) for e in toy_corpus(64)]
    return train_bpe(corpus, 300)


@pytest.fixture
def phrasebank_file(tmp_path):
    lines = [
        "Profit rose to EUR 12 mn .@positive",
        "The company cut 200 jobs .@negative",
        "The firm is based in Helsinki .@neutral",
        "Sales e-mail@example.com doubled .@positive",
        "Orders fell sharply .@negative",
        "The meeting is on Tuesday .@neutral",
        "Margins improved again .@positive",
        "Losses widened in Q3 .@negative",
        "Headquarters remain unchanged .@neutral",
        "Revenue beat expectations .@positive",
    ]
    path = tmp_path / "Sentences_sample.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
