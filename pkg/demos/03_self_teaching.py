"""Teacher, soft labels, student: self-teaching on noisy tagging data.

Tagging has no labels on the translated side, so the teacher only ever sees
source supervision.  The student additionally matches the teacher's soft
predictions on the target stream through a KL term.

Run:  python3 demos/03_self_teaching.py      (under a minute on one core)
"""

from filterxl import corpus
from filterxl.encoder import EncoderConfig
from filterxl.evaluation import score_language
from filterxl.model import FilterConfig, FilterModel, TaskKind
from filterxl.trainer import TrainConfig, generate_soft_labels, train_student, train_teacher

ds = corpus.generate("tagging", 600, seed=1, noise=0.1)
train, test = ds.splits["train"], ds.splits["test"]
model_cfg = FilterConfig(EncoderConfig(corpus.vocab_size()), 2, 1, TaskKind.tagging(corpus.N_TAGS))
train_cfg = TrainConfig(0.0, learning_rate=1e-3, epochs=6, seed=1)


def show(epoch, model, row):
    print(f"  epoch {epoch}: " + ", ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float)))


print("teacher")
teacher, _ = train_teacher(train, model_cfg, train_cfg, callback=show)
soft = generate_soft_labels(teacher, train)
print(f"{len(soft)} soft-label entries generated from the frozen teacher")
print("student")
student, _ = train_student(train, soft, model_cfg, train_cfg, callback=show)

for name, m in (("teacher", teacher), ("student", student)):
    scores = score_language(m, test, "target")
    print(f"{name}: target token accuracy {scores['token_accuracy']:.4f}, entity F1 {scores['entity_f1']:.4f}")
