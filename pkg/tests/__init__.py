# Tests for the hospital readmission prediction system