"""The evaluation protocol over a small fleet of phantoms.

Detections are matched one-to-one against ground truth (greedy by score,
IoU criterion in the sagittal plane), which yields localization error,
precision/recall, and fracture classification metrics: ROC AUC at the mild
(G <= 0.8) and moderate (G <= 0.74) thresholds, on vertebra level and,
via the per-patient minimum index, on patient level.
"""

from spinequant import PhantomConfig
from spinequant.evaluation import evaluate_study_set
from spinequant.pipeline import PipelineConfig, rescore_chain, run_phantom_chain

cfg = PipelineConfig()
amplitudes = (0.0, 15.0, 30.0)

# alternate fractured spines with healthy ones so the patient level has both
# classes (a patient's score is the minimum index over its vertebrae)
healthy = tuple((20.0 - 0.2 * k, 20.0, 20.0) for k in range(12))

clean_studies, noisy_studies = [], []
for seed in range(6):
    phantom = PhantomConfig(scoliosis_amplitude_mm=amplitudes[seed % 3], seed=seed,
                            heights_mm=healthy if seed % 2 else None)
    chain = run_phantom_chain(phantom, cfg)
    clean_studies.append(chain.study_for_evaluation(cfg))
    _, noisy = rescore_chain(chain, cfg, keypoint_noise_mm=0.5, noise_seed=100 + seed)
    noisy_studies.append(chain.study_for_evaluation(cfg, results=noisy))
    print(f"phantom {seed}: amplitude {phantom.scoliosis_amplitude_mm:4.1f} mm, "
          f"{len(chain.results)} vertebrae detected")

for name, studies in (("oracle predictions", clean_studies),
                      ("0.5 mm keypoint noise", noisy_studies)):
    report, problems = evaluate_study_set(studies, iou_threshold=cfg.match_iou,
                                          mild_cut=cfg.mild_cut,
                                          moderate_cut=cfg.moderate_cut)
    print(f"\n=== {name} ===")
    print(report.to_text())
    if problems:
        print("undefined:", problems)
