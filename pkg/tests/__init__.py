# Tests Init
