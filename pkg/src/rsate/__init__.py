"""Region-specific treatment effects in multi-regional trials with
conformal selective borrowing."""

from rsate.conformal import conformal_pvalues, conformal_scores, cvplus_pvalues
from rsate.csb import (CsbConfig, choose_threshold, csb_pipeline, estimate_csb_ivw,
                       mse_curve, select_set)
from rsate.data import (CovariateSchema, StudyDataset, TrialRecord, difference_in_means,
                        load_dataset, nn_match, save_dataset, validate)
from rsate.estimators import (DesignPropensity, estimate_fb_ivw, estimate_fb_xonly,
                              estimate_nb_allcov, estimate_nb_xonly, ivw_predictions)
from rsate.frt import RandomizationScheme, frt_pvalue, rerandomize_target
from rsate.models import fit_linear, fit_logistic, kfold_split, predict
from rsate.results import TauEstimate, confidence_interval
from rsate.sim import DgpConfig, generate_trial, signal_ratio, true_rsate

__version__ = "0.1.0"
