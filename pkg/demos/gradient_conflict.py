"""Do classifiers agree on how to update the layers they share?

After some Early-Exit training, each exit's loss is back-propagated on its
own and the gradients on a shared feed-forward matrix are compared row by
row. A similarity near 1 means the classifiers pull the weights the same
way; near 0 means their updates are unrelated; negative means they fight.
"""

import numpy as np

from sweetexit.conflict import conflict_reports
from sweetexit.data import SyntheticTaskSpec, generate_synthetic
from sweetexit.model import ModelConfig
from sweetexit.training import RegimeConfig, train

data = generate_synthetic(SyntheticTaskSpec(size=2000, seed=0))
model = train(RegimeConfig(regime="ee", epochs=4, max_steps=400), ModelConfig(), data).model

batch, labels = data.batch(np.arange(64))
for report in conflict_reports(model, batch, labels):
    print(f"layer {report.layer} ({report.matrix}), {report.skipped_rows} zero rows skipped")
    for p in report.pairs:
        print(f"  classifiers {p['i']} and {p['j']}: {p['sim']:+.3f}")
