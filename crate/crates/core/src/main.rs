fn main() -> std::process::ExitCode {
    anglereloc::cli::main_entry()
}
