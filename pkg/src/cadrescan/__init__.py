"""Supervised cadre models and survey-weighted association scans."""

from .associations import (AssociationRecord, GlmOutcome, association_frame,
                           bh_adjust, build_association_table)
from .dataset import (StandardizerState, SurveyDataset, VariableRoles,
                      log_transform_exposures, read_survey_csv,
                      standardize_fit_apply, validate_dataset,
                      write_survey_csv)
from .glm import GlmFit, GlmSpec, fit_weighted_glm, linearized_covariance, wald_pvalues
from .model import (CadreAssignment, ScmParams, assign,
                    cadre_conditional_entropy, harden, membership,
                    memberships, predict, predict_matrix)
from .pipeline import StudyConfig, StudyResult, emit_report, run_ewas
from .selection import (FittedScm, SelectedModel, SelectionConfig, best_overall,
                        bic, select_model)
from .synth import SyntheticSpec, generate_synthetic, hypertension_label, label_agreement
from .training import (TrainConfig, TrainResult, TrainingDiverged, fit_scm,
                       objective_cbp, objective_gradient, objective_hyp)

__version__ = "0.1.0"
