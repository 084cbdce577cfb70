# Registration, sampling and template estimation
